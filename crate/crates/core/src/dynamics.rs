//! Benchmark autonomous systems and a fixed-step RK4 integrator.
//!
//! All systems here are of the form `ẋ = f(x)`, `y = h(x)`. Integration runs
//! forward or backward in time on a constant grid; backward integration is a
//! forward RK4 with a negated step.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{KklError, Result};
use crate::export::{numbered, write_header, write_row};
use crate::scalar::{all_finite, norm2, Scalar};

/// Default state-norm threshold above which a simulation counts as blown up.
pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;

/// Axis-aligned box `[lower, upper]` in state space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Scalar> DomainBox<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    /// The cube `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: T, hi: T) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(KklError::InvalidInput(format!(
                "box bounds must be non-empty and of equal length (got {} and {})",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for (k, (&lo, &hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(KklError::InvalidInput(format!(
                    "degenerate box in dimension {k}: lower {lo} must be below upper {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }
}

/// Smooth radial cut-off `g(x)`: 1 inside radius `r`, 0 beyond `r + d`,
/// joined by the C¹ Hermite cubic in between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationSpec<T> {
    pub r: T,
    pub d: T,
}

impl<T: Scalar> Default for SaturationSpec<T> {
    fn default() -> Self {
        Self { r: T::lit(3.0), d: T::lit(7.0) }
    }
}

impl<T: Scalar> SaturationSpec<T> {
    pub fn new(r: T, d: T) -> Result<Self> {
        if !(r > T::zero()) || !(d > T::zero()) {
            return Err(KklError::InvalidInput(format!("saturation radii must be positive (r = {r}, d = {d})")));
        }
        Ok(Self { r, d })
    }

    /// Transition polynomial `p(s) = 1 − 3(s/d)² + 2(s/d)³` on `[0, d]`.
    pub fn transition(&self, s: T) -> T {
        let u = s / self.d;
        T::one() - T::lit(3.0) * u * u + T::lit(2.0) * u * u * u
    }

    /// `g` as a function of the radius `‖x‖₂`.
    pub fn weight_at_radius(&self, radius: T) -> T {
        if radius <= self.r {
            T::one()
        } else if radius >= self.r + self.d {
            T::zero()
        } else {
            self.transition(radius - self.r)
        }
    }

    pub fn weight(&self, x: &[T]) -> T {
        self.weight_at_radius(norm2(x))
    }
}

/// Reverse Duffing oscillator: `ẋ₁ = x₂³`, `ẋ₂ = −x₁`.
pub fn eval_reverse_duffing<T: Scalar>(x: &[T; 2]) -> [T; 2] {
    [x[1] * x[1] * x[1], -x[0]]
}

/// Autonomous Van der Pol oscillator: `ẋ₁ = x₂`, `ẋ₂ = (1 − x₁²)x₂ − x₁`.
pub fn eval_van_der_pol<T: Scalar>(x: &[T; 2]) -> [T; 2] {
    [x[1], (T::one() - x[0] * x[0]) * x[1] - x[0]]
}

/// Van der Pol field multiplied by the radial saturation `g(x)`.
pub fn eval_van_der_pol_saturated<T: Scalar>(x: &[T; 2], sat: &SaturationSpec<T>) -> [T; 2] {
    let f = eval_van_der_pol(x);
    let radius = norm2(x);
    if radius <= sat.r {
        return f;
    }
    let g = sat.weight_at_radius(radius);
    [f[0] * g, f[1] * g]
}

/// The vector field of a [`SystemModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SystemKind<T: Scalar> {
    ReverseDuffing,
    VanDerPol,
    SaturatedVanDerPol(SaturationSpec<T>),
    /// `ẋ = A x`, `y = C x`.
    Linear { a: DMatrix<T>, c: DMatrix<T> },
}

/// Autonomous plant `ẋ = f(x)`, `y = h(x)` with its domain of interest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemModel<T: Scalar> {
    pub name: String,
    pub kind: SystemKind<T>,
    pub domain: DomainBox<T>,
}

impl<T: Scalar> SystemModel<T> {
    /// Reverse Duffing on `[−1, 1]²`.
    pub fn reverse_duffing() -> Self {
        Self {
            name: "rev-duffing".into(),
            kind: SystemKind::ReverseDuffing,
            domain: DomainBox::cube(2, -T::one(), T::one()).expect("static box"),
        }
    }

    /// Plain Van der Pol on `[−2.7, 2.7]²`. Blows up in backward time from
    /// outside its limit cycle.
    pub fn van_der_pol() -> Self {
        Self {
            name: "van-der-pol".into(),
            kind: SystemKind::VanDerPol,
            domain: DomainBox::cube(2, T::lit(-2.7), T::lit(2.7)).expect("static box"),
        }
    }

    pub fn van_der_pol_saturated(sat: SaturationSpec<T>) -> Self {
        Self {
            name: "van-der-pol-sat".into(),
            kind: SystemKind::SaturatedVanDerPol(sat),
            domain: DomainBox::cube(2, T::lit(-2.7), T::lit(2.7)).expect("static box"),
        }
    }

    pub fn linear(a: DMatrix<T>, c: DMatrix<T>, domain: DomainBox<T>) -> Result<Self> {
        if a.nrows() != a.ncols() || c.ncols() != a.nrows() || c.nrows() == 0 {
            return Err(KklError::InvalidInput(format!(
                "linear system needs square A and C with matching columns (A {}x{}, C {}x{})",
                a.nrows(),
                a.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        if domain.dim() != a.nrows() {
            return Err(KklError::InvalidInput("domain dimension does not match A".into()));
        }
        Ok(Self { name: "linear".into(), kind: SystemKind::Linear { a, c }, domain })
    }

    /// Looks a benchmark up by its identifier.
    pub fn by_name(name: &str, sat: SaturationSpec<T>) -> Option<Self> {
        match name {
            "rev-duffing" => Some(Self::reverse_duffing()),
            "van-der-pol" => Some(Self::van_der_pol()),
            "van-der-pol-sat" => Some(Self::van_der_pol_saturated(sat)),
            _ => None,
        }
    }

    pub fn dim_x(&self) -> usize {
        match &self.kind {
            SystemKind::Linear { a, .. } => a.nrows(),
            _ => 2,
        }
    }

    pub fn dim_y(&self) -> usize {
        match &self.kind {
            SystemKind::Linear { c, .. } => c.nrows(),
            _ => 1,
        }
    }

    /// Integration step used in the reference experiments.
    pub fn default_dt(&self) -> T {
        match self.kind {
            SystemKind::ReverseDuffing => T::lit(1e-3),
            _ => T::lit(1e-2),
        }
    }

    /// Writes `f(x)` into `out`.
    pub fn f(&self, x: &[T], out: &mut [T]) {
        match &self.kind {
            SystemKind::ReverseDuffing => {
                let v = eval_reverse_duffing(&[x[0], x[1]]);
                out[..2].copy_from_slice(&v);
            }
            SystemKind::VanDerPol => {
                let v = eval_van_der_pol(&[x[0], x[1]]);
                out[..2].copy_from_slice(&v);
            }
            SystemKind::SaturatedVanDerPol(sat) => {
                let v = eval_van_der_pol_saturated(&[x[0], x[1]], sat);
                out[..2].copy_from_slice(&v);
            }
            SystemKind::Linear { a, .. } => {
                for (i, o) in out.iter_mut().enumerate().take(a.nrows()) {
                    *o = (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum();
                }
            }
        }
    }

    /// Writes `h(x)` into `out`.
    pub fn h(&self, x: &[T], out: &mut [T]) {
        match &self.kind {
            SystemKind::Linear { c, .. } => {
                for (i, o) in out.iter_mut().enumerate().take(c.nrows()) {
                    *o = (0..c.ncols()).map(|j| c[(i, j)] * x[j]).sum();
                }
            }
            _ => out[0] = x[0],
        }
    }

    pub fn eval_f(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim_x()];
        self.f(x, &mut out);
        out
    }

    pub fn eval_h(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim_y()];
        self.h(x, &mut out);
        out
    }
}

/// Reusable stage buffers for in-place RK4 steps.
#[derive(Clone, Debug)]
pub struct Rk4<T> {
    k: [Vec<T>; 4],
    tmp: Vec<T>,
}

impl<T: Scalar> Rk4<T> {
    pub fn new(dim: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![T::zero(); dim]), tmp: vec![T::zero(); dim] }
    }

    /// Advances `x` by `dt` in place. On failure returns the 1-based stage
    /// whose derivative (or the final state, reported as stage 4) was non-finite.
    pub fn step<F>(&mut self, f: &F, x: &mut [T], dt: T) -> std::result::Result<(), u8>
    where
        F: Fn(&[T], &mut [T]) + ?Sized,
    {
        let half = dt * T::lit(0.5);
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;

        f(x, k1);
        if !all_finite(k1) {
            return Err(1);
        }
        for i in 0..x.len() {
            tmp[i] = x[i] + half * k1[i];
        }
        f(tmp, k2);
        if !all_finite(k2) {
            return Err(2);
        }
        for i in 0..x.len() {
            tmp[i] = x[i] + half * k2[i];
        }
        f(tmp, k3);
        if !all_finite(k3) {
            return Err(3);
        }
        for i in 0..x.len() {
            tmp[i] = x[i] + dt * k3[i];
        }
        f(tmp, k4);
        let sixth = dt / T::lit(6.0);
        for i in 0..x.len() {
            x[i] += sixth * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]);
        }
        if !all_finite(k4) || !all_finite(x) {
            return Err(4);
        }
        Ok(())
    }
}

/// One classical RK4 step of `ẋ = f(x)`. A negative `dt` steps backward.
pub fn rk4_step<T, F>(f: F, x: &[T], dt: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&[T], &mut [T]),
{
    if dt == T::zero() || !dt.is_finite() {
        return Err(KklError::InvalidInput(format!("RK4 step must be finite and non-zero, got {dt}")));
    }
    let mut out = x.to_vec();
    Rk4::new(x.len()).step(&f, &mut out, dt).map_err(|stage| KklError::BlowUp {
        step: 0,
        time: 0.0,
        stage,
        norm: norm2(&out).as_f64(),
        hint: String::new(),
    })?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Number of constant steps covering `duration`, rounded up.
pub fn step_count<T: Scalar>(duration: T, dt: T) -> usize {
    let ratio = (duration / dt).as_f64();
    // Absorb floating error so that e.g. 1.0 / 0.1 gives 10 steps, not 11.
    (ratio - 1e-9 * ratio.max(1.0)).ceil().max(0.0) as usize
}

/// Discretized solution on a constant grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
    pub outputs: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &[T] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Fills `outputs` with `h` evaluated along the trajectory.
    pub fn with_outputs(mut self, system: &SystemModel<T>) -> Self {
        self.outputs = Some(self.states.iter().map(|x| system.eval_h(x)).collect());
        self
    }

    /// Writes `t,x1,...,xdx[,y1,...,ydy]` CSV.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let dx = self.states.first().map_or(0, Vec::len);
        let mut cols = vec!["t".to_string()];
        cols.extend(numbered("x", dx));
        if let Some(ys) = &self.outputs {
            cols.extend(numbered("y", ys.first().map_or(0, Vec::len)));
        }
        write_header(w, &cols)?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = vec![*t];
            row.extend_from_slice(&self.states[k]);
            if let Some(ys) = &self.outputs {
                row.extend_from_slice(&ys[k]);
            }
            write_row(w, row)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SimOptions<T> {
    pub dt: T,
    pub direction: Direction,
    pub blowup_bound: T,
}

impl<T: Scalar> SimOptions<T> {
    pub fn forward(dt: T) -> Self {
        Self { dt, direction: Direction::Forward, blowup_bound: T::lit(DEFAULT_BLOWUP_BOUND) }
    }

    pub fn backward(dt: T) -> Self {
        Self { dt, direction: Direction::Backward, blowup_bound: T::lit(DEFAULT_BLOWUP_BOUND) }
    }

    fn signed_dt(&self) -> T {
        match self.direction {
            Direction::Forward => self.dt,
            Direction::Backward => -self.dt,
        }
    }
}

fn check_sim_inputs<T: Scalar>(duration: T, opts: &SimOptions<T>) -> Result<()> {
    if !(opts.dt > T::zero()) || !opts.dt.is_finite() {
        return Err(KklError::InvalidInput(format!("dt must be positive, got {}", opts.dt)));
    }
    if !(duration > T::zero()) || !duration.is_finite() {
        return Err(KklError::InvalidInput(format!("duration must be positive, got {duration}")));
    }
    Ok(())
}

const BLOWUP_HINT: &str = "; the dynamics may need to be saturated outside the domain of interest";

/// Integrates `ẋ = f(x)` on a constant grid and records every state.
///
/// The horizon is rounded up to a whole number of steps; the recorded times
/// carry the actual horizon.
pub fn simulate<T, F>(f: F, x0: &[T], duration: T, opts: SimOptions<T>) -> Result<Trajectory<T>>
where
    T: Scalar,
    F: Fn(&[T], &mut [T]),
{
    check_sim_inputs(duration, &opts)?;
    let n = step_count(duration, opts.dt);
    let h = opts.signed_dt();
    let mut rk = Rk4::new(x0.len());
    let mut x = x0.to_vec();
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    times.push(T::zero());
    states.push(x.clone());
    for step in 1..=n {
        let t = h * T::from_usize(step).unwrap_or_else(T::infinity);
        let res = rk.step(&f, &mut x, h);
        let norm = norm2(&x);
        if let Err(stage) = res {
            return Err(blowup(step, t, stage, norm));
        }
        if norm > opts.blowup_bound {
            return Err(blowup(step, t, 0, norm));
        }
        times.push(t);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states, outputs: None })
}

/// Like [`simulate`] but keeps only the final state.
pub fn integrate_final<T, F>(f: F, x0: &[T], duration: T, opts: SimOptions<T>) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&[T], &mut [T]),
{
    check_sim_inputs(duration, &opts)?;
    let n = step_count(duration, opts.dt);
    integrate_steps(f, x0, n, opts)
}

/// Takes exactly `steps` RK4 steps.
pub fn integrate_steps<T, F>(f: F, x0: &[T], steps: usize, opts: SimOptions<T>) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&[T], &mut [T]),
{
    let h = opts.signed_dt();
    let mut rk = Rk4::new(x0.len());
    let mut x = x0.to_vec();
    for step in 1..=steps {
        let res = rk.step(&f, &mut x, h);
        let norm = norm2(&x);
        let t = h * T::from_usize(step).unwrap_or_else(T::infinity);
        if let Err(stage) = res {
            return Err(blowup(step, t, stage, norm));
        }
        if norm > opts.blowup_bound {
            return Err(blowup(step, t, 0, norm));
        }
    }
    Ok(x)
}

fn blowup<T: Scalar>(step: usize, t: T, stage: u8, norm: T) -> KklError {
    KklError::BlowUp { step, time: t.as_f64(), stage, norm: norm.as_f64(), hint: BLOWUP_HINT.to_string() }
}

/// Convenience: simulates a system and attaches its outputs.
pub fn simulate_system<T: Scalar>(
    system: &SystemModel<T>,
    x0: &[T],
    duration: T,
    opts: SimOptions<T>,
) -> Result<Trajectory<T>> {
    Ok(simulate(|x, out| system.f(x, out), x0, duration, opts)?.with_outputs(system))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_duffing_values() {
        let v = eval_reverse_duffing(&[0.6f64, 0.6]);
        assert!((v[0] - 0.216).abs() < 1e-15 && v[1] == -0.6);
        assert_eq!(eval_reverse_duffing(&[0.0, 0.0]), [0.0, -0.0]);
        assert_eq!(eval_reverse_duffing(&[1.0, -1.0]), [-1.0, -1.0]);
        let sys = SystemModel::<f64>::reverse_duffing();
        assert_eq!(sys.eval_h(&[0.3, -0.2]), vec![0.3]);
    }

    #[test]
    fn saturated_van_der_pol_regions() {
        let sat = SaturationSpec::<f64>::default();
        assert_eq!(eval_van_der_pol_saturated(&[1.0, 0.0], &sat), [0.0, -1.0]);
        assert_eq!(eval_van_der_pol_saturated(&[11.0, 0.0], &sat), [0.0, 0.0]);
        let f = eval_van_der_pol(&[6.5f64, 0.0]);
        let g = eval_van_der_pol_saturated(&[6.5, 0.0], &sat);
        assert!((sat.weight(&[6.5, 0.0]) - 0.5).abs() < 1e-15);
        assert!((g[1] - 0.5 * f[1]).abs() < 1e-12);
    }

    #[test]
    fn hermite_cubic_is_c1_at_both_ends() {
        let sat = SaturationSpec::<f64>::default();
        let h = 1e-7;
        for edge in [sat.r, sat.r + sat.d] {
            let left = sat.weight_at_radius(edge - 1e-13);
            let right = sat.weight_at_radius(edge + 1e-13);
            assert!((left - right).abs() < 1e-12, "value jump at {edge}");
            let dl = (sat.weight_at_radius(edge) - sat.weight_at_radius(edge - h)) / h;
            let dr = (sat.weight_at_radius(edge + h) - sat.weight_at_radius(edge)) / h;
            // One-sided differences of a C¹ function with zero slope at the joint.
            assert!(dl.abs() < 1e-6 && dr.abs() < 1e-6, "slope jump at {edge}: {dl} vs {dr}");
        }
    }

    #[test]
    fn rk4_on_exponential_decay() {
        assert_eq!(rk4_step(|_x: &[f64], o: &mut [f64]| o.fill(0.0), &[1.5, -2.0], 0.3).unwrap(), vec![1.5, -2.0]);
        let decay = |x: &[f64], o: &mut [f64]| o[0] = -x[0];
        let fwd = rk4_step(decay, &[1.0], 0.1).unwrap()[0];
        assert!((fwd - (-0.1f64).exp()).abs() < 1e-7);
        let bwd = rk4_step(decay, &[1.0], -0.1).unwrap()[0];
        assert!((bwd - 0.1f64.exp()).abs() < 1e-6);
        assert!(rk4_step(decay, &[1.0], 0.0).is_err());
    }

    #[test]
    fn rk4_reports_blowup_stage() {
        let err = rk4_step(|x: &[f64], o: &mut [f64]| o[0] = 1.0 / (x[0] - 1.0), &[1.0], 0.1).unwrap_err();
        match err {
            KklError::BlowUp { stage, .. } => assert_eq!(stage, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let decay = |x: &[f64], o: &mut [f64]| o[0] = -x[0];
        let err = |dt: f64| {
            let x = integrate_final(decay, &[1.0], 1.0, SimOptions::forward(dt)).unwrap()[0];
            (x - (-1.0f64).exp()).abs()
        };
        let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
        for ratio in [e1 / e2, e2 / e3] {
            assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn step_count_rounds_up() {
        assert_eq!(step_count(1.0, 0.1), 10);
        assert_eq!(step_count(1.05, 0.1), 11);
        let tr = simulate(|_x: &[f64], o: &mut [f64]| o[0] = 1.0, &[0.0], 1.05, SimOptions::forward(0.1)).unwrap();
        assert_eq!(tr.len(), 12);
        assert!((tr.times[11] - 1.1).abs() < 1e-12);
        let back = simulate(|_x: &[f64], o: &mut [f64]| o[0] = 1.0, &[0.0], 0.3, SimOptions::backward(0.1)).unwrap();
        assert!(back.times.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn forward_backward_roundtrip_reverse_duffing() {
        let sys = SystemModel::<f64>::reverse_duffing();
        let f = |x: &[f64], o: &mut [f64]| sys.f(x, o);
        let fwd = integrate_final(f, &[0.6, 0.6], 5.0, SimOptions::forward(1e-3)).unwrap();
        let back = integrate_final(f, &fwd, 5.0, SimOptions::backward(1e-3)).unwrap();
        assert!((back[0] - 0.6).abs() < 1e-6 && (back[1] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn unsaturated_van_der_pol_blows_up_backward() {
        let plain = SystemModel::<f64>::van_der_pol();
        let sat = SystemModel::<f64>::van_der_pol_saturated(SaturationSpec::default());
        // Outside the limit cycle the plain field escapes in finite backward time.
        let x0 = [2.7, 2.7];
        let err = simulate_system(&plain, &x0, 30.0, SimOptions::backward(1e-2)).unwrap_err();
        assert!(matches!(err, KklError::BlowUp { .. }));
        assert!(err.to_string().contains("saturated"));
        let tr = simulate_system(&sat, &x0, 30.0, SimOptions::backward(1e-2)).unwrap();
        assert!(tr.states.iter().all(|x| norm2(x) < 10.5));
        // From inside the cycle both go to the origin backward.
        let tr = simulate_system(&sat, &[0.1, 0.1], 30.0, SimOptions::backward(1e-2)).unwrap();
        assert!(norm2(tr.last_state()) < 0.1);
    }

    #[test]
    fn trajectory_csv_header() {
        let sys = SystemModel::<f64>::reverse_duffing();
        let tr = simulate_system(&sys, &[0.1, 0.2], 0.002, SimOptions::forward(1e-3)).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x1,x2,y1"));
        assert_eq!(lines.count(), 3);
        let last: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(last, vec![0.0, 0.1, 0.2, 0.1]);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(DomainBox::new(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(DomainBox::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn generic_over_f32() {
        let sys = SystemModel::<f32>::van_der_pol_saturated(SaturationSpec::default());
        let tr = simulate_system(&sys, &[0.5f32, 0.0], 1.0, SimOptions::forward(1e-2)).unwrap();
        assert_eq!(tr.len(), 101);
    }
}
