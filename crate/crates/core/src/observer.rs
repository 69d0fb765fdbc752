//! Online use of a learned observer: filtering measurements through
//! `ż = D z + F y`, decoding `x̂ = T*(z, ω_c)` and scoring the estimate.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_system, SimOptions, SystemModel, Trajectory};
use crate::error::{KklError, Result};
use crate::export::{fmt_num, numbered, write_header, write_row};
use crate::learning::{Decoder, Encoder};
use crate::linfilter::FilterDesign;
use crate::sampling::{backward_forward, convergence_time, BackwardForwardOptions, FilterMatrices};
use crate::scalar::Scalar;

/// Adds i.i.d. `N(0, σ²)` noise to every component of every sample.
pub fn add_noise<T: Scalar>(outputs: &[Vec<T>], sigma: f64, seed: u64) -> Result<Vec<Vec<T>>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(KklError::InvalidInput(format!("noise sigma must be a finite non-negative number, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(outputs.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| KklError::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(outputs
        .iter()
        .map(|y| y.iter().map(|&v| v + T::lit(normal.sample(&mut rng))).collect())
        .collect())
}

/// How the measurement is reconstructed between samples inside an RK4 step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
    ZeroOrderHold,
}

#[derive(Clone, Debug)]
pub struct EstimateOptions<T> {
    pub dt: T,
    /// Initial filter state; zero when `None`.
    pub z0: Option<Vec<T>>,
    pub interpolation: Interpolation,
}

impl<T: Scalar> EstimateOptions<T> {
    pub fn new(dt: T) -> Self {
        Self { dt, z0: None, interpolation: Interpolation::Linear }
    }
}

/// Filter states driven by a sampled measurement sequence, one per sample.
pub fn run_filter<T: Scalar>(filter: &FilterMatrices<T>, measured: &[Vec<T>], opts: &EstimateOptions<T>) -> Result<Vec<Vec<T>>> {
    let dz = filter.d_z;
    let mut z = match &opts.z0 {
        Some(z0) if z0.len() != dz => {
            return Err(KklError::InvalidInput(format!("z0 has length {} but the filter has {dz} states", z0.len())))
        }
        Some(z0) => z0.clone(),
        None => vec![T::zero(); dz],
    };
    if let Some(bad) = measured.iter().position(|y| y.len() != filter.d_y) {
        return Err(KklError::InvalidInput(format!("measurement {bad} has wrong dimension")));
    }
    let mut out = Vec::with_capacity(measured.len());
    if measured.is_empty() {
        return Ok(out);
    }
    out.push(z.clone());
    let dt = opts.dt;
    let half = T::lit(0.5);
    let mut k = [vec![T::zero(); dz], vec![T::zero(); dz], vec![T::zero(); dz], vec![T::zero(); dz]];
    let mut tmp = vec![T::zero(); dz];
    let mut ymid = vec![T::zero(); filter.d_y];
    for step in 0..measured.len() - 1 {
        let y0 = &measured[step];
        let y1 = match opts.interpolation {
            Interpolation::Linear => &measured[step + 1],
            Interpolation::ZeroOrderHold => y0,
        };
        for (m, (&a, &b)) in ymid.iter_mut().zip(y0.iter().zip(y1)) {
            *m = (a + b) * half;
        }
        filter.rate(&z, y0, &mut k[0]);
        for i in 0..dz {
            tmp[i] = z[i] + half * dt * k[0][i];
        }
        filter.rate(&tmp, &ymid, &mut k[1]);
        for i in 0..dz {
            tmp[i] = z[i] + half * dt * k[1][i];
        }
        filter.rate(&tmp, &ymid, &mut k[2]);
        for i in 0..dz {
            tmp[i] = z[i] + dt * k[2][i];
        }
        filter.rate(&tmp, y1, &mut k[3]);
        let sixth = dt / T::lit(6.0);
        for i in 0..dz {
            z[i] += sixth * (k[0][i] + T::lit(2.0) * (k[1][i] + k[2][i]) + k[3][i]);
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(KklError::NonFiniteState { step: step + 1 });
        }
        out.push(z.clone());
    }
    Ok(out)
}

fn decode_all<T: Scalar, M: Decoder<T> + ?Sized>(observer: &M, zs: &[Vec<T>], omega_c: f64) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(zs.len());
    for chunk in zs.chunks(4096) {
        let refs: Vec<&[T]> = chunk.iter().map(Vec::as_slice).collect();
        out.extend(observer.decode_states(&refs, T::lit(omega_c))?);
    }
    Ok(out)
}

/// Filter states and decoded estimates for a measurement sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutput<T> {
    pub z: Vec<Vec<T>>,
    pub estimates: Vec<Vec<T>>,
}

pub fn estimate<T: Scalar, M: Decoder<T> + ?Sized>(
    observer: &M,
    design: &FilterDesign,
    measured: &[Vec<T>],
    opts: &EstimateOptions<T>,
) -> Result<FilterOutput<T>> {
    if observer.filter_dim() != design.d_z {
        return Err(KklError::InvalidInput("observer and design disagree on d_z".into()));
    }
    let z = run_filter(&FilterMatrices::from_design(design), measured, opts)?;
    let estimates = decode_all(observer, &z, design.omega_c)?;
    Ok(FilterOutput { z, estimates })
}

/// `sqrt(mean_t ‖a(t) − b(t)‖²)`.
pub fn rmse<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(u, v)| u.iter().zip(v).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum::<f64>())
        .sum();
    (sum / a.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationRun<T> {
    pub omega_c: f64,
    pub truth: Trajectory<T>,
    pub measured: Vec<Vec<T>>,
    pub z: Vec<Vec<T>>,
    pub estimates: Vec<Vec<T>>,
    pub rmse: f64,
    /// RMSE restricted to `t > 3 t_c / 10`.
    pub post_transient_rmse: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl<T: Scalar> EstimationRun<T> {
    pub fn errors(&self) -> Vec<f64> {
        self.estimates
            .iter()
            .zip(&self.truth.states)
            .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    /// Writes `t,x1..,y_meas..,z1..,xhat1..`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let dx = self.truth.states.first().map_or(0, Vec::len);
        let dy = self.measured.first().map_or(0, Vec::len);
        let dz = self.z.first().map_or(0, Vec::len);
        let mut cols = vec!["t".to_string()];
        cols.extend(numbered("x", dx));
        if dy == 1 {
            cols.push("y_meas".into());
        } else {
            cols.extend(numbered("y_meas", dy));
        }
        cols.extend(numbered("z", dz));
        cols.extend(numbered("xhat", dx));
        write_header(w, &cols)?;
        for i in 0..self.truth.len() {
            let row = std::iter::once(self.truth.times[i])
                .chain(self.truth.states[i].iter().copied())
                .chain(self.measured[i].iter().copied())
                .chain(self.z[i].iter().copied())
                .chain(self.estimates[i].iter().copied());
            write_row(w, row)?;
        }
        Ok(())
    }
}

/// Settings of a simulated test trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub duration: f64,
    /// Integration and sampling step; the system default when `None`.
    pub dt: Option<f64>,
    pub sigma: f64,
    pub seed: u64,
    pub interpolation: Interpolation,
    /// Start the filter on `T(x(0), ω_c)` instead of zero.
    pub start_on_manifold: bool,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { duration: 50.0, dt: None, sigma: 0.0, seed: 0, interpolation: Interpolation::Linear, start_on_manifold: false }
    }
}

/// Simulates the system from `x0`, corrupts the output and runs the observer.
pub fn evaluate_trajectory<T, M>(
    observer: &M,
    design: &FilterDesign,
    system: &SystemModel<T>,
    x0: &[T],
    cfg: &TrajectoryConfig,
) -> Result<EstimationRun<T>>
where
    T: Scalar,
    M: Decoder<T> + Encoder<T> + ?Sized,
{
    let dt = cfg.dt.map(T::lit).unwrap_or_else(|| system.default_dt());
    let truth = simulate_system(system, x0, T::lit(cfg.duration), SimOptions::forward(dt))?.with_outputs(system);
    let clean = truth.outputs.clone().expect("outputs attached");
    let measured = add_noise(&clean, cfg.sigma, cfg.seed)?;
    let mut opts = EstimateOptions::new(dt);
    opts.interpolation = cfg.interpolation;
    if cfg.start_on_manifold {
        opts.z0 = Some(observer.encode_state(x0, T::lit(design.omega_c))?);
    }
    let out = estimate(observer, design, &measured, &opts)?;
    let total = rmse(&out.estimates, &truth.states);
    let t0 = 0.3 * convergence_time(design);
    let keep: Vec<usize> = (0..truth.len()).filter(|&i| truth.times[i].as_f64() > t0).collect();
    let post = if keep.is_empty() {
        f64::NAN
    } else {
        let a: Vec<Vec<T>> = keep.iter().map(|&i| out.estimates[i].clone()).collect();
        let b: Vec<Vec<T>> = keep.iter().map(|&i| truth.states[i].clone()).collect();
        rmse(&a, &b)
    };
    Ok(EstimationRun {
        omega_c: design.omega_c,
        truth,
        measured,
        z: out.z,
        estimates: out.estimates,
        rmse: total,
        post_transient_rmse: post,
        noise_sigma: cfg.sigma,
        seed: cfg.seed,
    })
}

/// Below this error the filter is considered to sit on the manifold.
pub const CONVERGED_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionOptions {
    pub duration: f64,
    pub dt: f64,
    /// Fit window as fractions of `duration`.
    pub window: (f64, f64),
    /// Samples with error below `plateau_factor` times the final error are
    /// excluded from the fit.
    pub plateau_factor: f64,
    pub z0: Option<Vec<f64>>,
}

impl ContractionOptions {
    pub fn new(duration: f64, dt: f64) -> Self {
        Self { duration, dt, window: (0.5, 1.0), plateau_factor: 10.0, z0: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractionOutcome {
    /// Least-squares slope of `log e(t)`.
    Rate { slope: f64, points: usize },
    /// `e(t)` dropped below the floor before the fit window ended.
    Converged { time: f64 },
    /// The whole fit window sits on the error floor `level`.
    Plateau { level: f64 },
}

impl ContractionOutcome {
    pub fn slope(&self) -> Option<f64> {
        match self {
            ContractionOutcome::Rate { slope, .. } => Some(*slope),
            ContractionOutcome::Converged { .. } | ContractionOutcome::Plateau { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContractionRun {
    pub times: Vec<f64>,
    pub errors: Vec<f64>,
    pub outcome: ContractionOutcome,
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Tracks `e(t) = ‖z(t) − T(x(t), ω_c)‖` along a noiseless run and fits its
/// exponential decay rate.
pub fn contraction_check<T, M>(
    observer: &M,
    design: &FilterDesign,
    system: &SystemModel<T>,
    x0: &[T],
    opts: &ContractionOptions,
) -> Result<ContractionRun>
where
    T: Scalar,
    M: Encoder<T> + ?Sized,
{
    let (w0, w1) = opts.window;
    if !(0.0 <= w0 && w0 < w1 && w1 <= 1.0) {
        return Err(KklError::InvalidInput(format!("invalid fit window ({w0}, {w1})")));
    }
    let dt = T::lit(opts.dt);
    let truth = simulate_system(system, x0, T::lit(opts.duration), SimOptions::forward(dt))?.with_outputs(system);
    let outputs = truth.outputs.as_ref().expect("outputs attached");
    let mut eo = EstimateOptions::new(dt);
    eo.z0 = opts.z0.as_ref().map(|z| z.iter().map(|&v| T::lit(v)).collect());
    let z = run_filter(&FilterMatrices::from_design(design), outputs, &eo)?;
    let omega = T::lit(design.omega_c);
    let mut errors = Vec::with_capacity(z.len());
    for (x, zk) in truth.states.iter().zip(&z) {
        let tz = observer.encode_state(x, omega)?;
        errors.push(zk.iter().zip(&tz).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>().sqrt());
    }
    let times: Vec<f64> = truth.times.iter().map(|t| t.as_f64()).collect();
    let t_end = times.last().copied().unwrap_or(0.0);
    let (ta, tb) = (w0 * t_end, w1 * t_end);
    if let Some(i) = (0..times.len()).find(|&i| times[i] <= tb && errors[i] < CONVERGED_FLOOR) {
        return Ok(ContractionRun { outcome: ContractionOutcome::Converged { time: times[i] }, times, errors });
    }
    let tail = ((times.len() as f64) * 0.9) as usize;
    let final_level = errors[tail.min(errors.len() - 1)..].iter().fold(f64::INFINITY, |m, &e| m.min(e));
    let guard = opts.plateau_factor * final_level;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..times.len() {
        if times[i] >= ta && times[i] <= tb && errors[i] > guard {
            xs.push(times[i]);
            ys.push(errors[i].ln());
        }
    }
    if xs.len() < 3 {
        return Ok(ContractionRun { outcome: ContractionOutcome::Plateau { level: final_level }, times, errors });
    }
    let slope = fit_slope(&xs, &ys);
    Ok(ContractionRun { outcome: ContractionOutcome::Rate { slope, points: xs.len() }, times, errors })
}

/// Per-point reconstruction error `‖x − T*(z, ω_c)‖₂` over a state grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T> {
    pub omega_c: f64,
    pub points: Vec<Vec<T>>,
    pub errors: Vec<f64>,
}

impl<T: Scalar> Heatmap<T> {
    pub fn median(&self) -> f64 {
        let mut e = self.errors.clone();
        e.sort_by(f64::total_cmp);
        let n = e.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            e[n / 2]
        } else {
            0.5 * (e[n / 2 - 1] + e[n / 2])
        }
    }

    pub fn max(&self) -> f64 {
        self.errors.iter().fold(0.0, |m, &e| m.max(e))
    }

    /// Writes `x1,..,error`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let dx = self.points.first().map_or(0, Vec::len);
        let mut cols = numbered("x", dx);
        cols.push("error".into());
        write_header(w, &cols)?;
        for (p, e) in self.points.iter().zip(&self.errors) {
            let mut line: Vec<String> = p.iter().map(|&v| fmt_num(v)).collect();
            line.push(fmt_num(*e));
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Heatmap over `grid`, pairing each point with its filter state by
/// backward-forward sampling at `design.omega_c`.
pub fn error_heatmap<T: Scalar, M: Decoder<T> + ?Sized>(
    observer: &M,
    design: &FilterDesign,
    system: &SystemModel<T>,
    grid: &[Vec<T>],
    dt: T,
) -> Result<Heatmap<T>> {
    let samples = backward_forward(system, design, grid, &BackwardForwardOptions::new(dt))?;
    let zs: Vec<Vec<T>> = samples.pairs.iter().map(|p| p.z.clone()).collect();
    let xs: Vec<Vec<T>> = samples.pairs.into_iter().map(|p| p.x).collect();
    heatmap_from_pairs(observer, design.omega_c, &xs, &zs)
}

pub fn heatmap_from_pairs<T: Scalar, M: Decoder<T> + ?Sized>(observer: &M, omega_c: f64, xs: &[Vec<T>], zs: &[Vec<T>]) -> Result<Heatmap<T>> {
    let est = decode_all(observer, zs, omega_c)?;
    let errors = est
        .iter()
        .zip(xs)
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum::<f64>().sqrt())
        .collect();
    Ok(Heatmap { omega_c, points: xs.to_vec(), errors })
}
