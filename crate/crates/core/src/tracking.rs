//! Steady-state parameterization, stabilizing feedback and Lyapunov schedules.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{stack_identity, ConstraintPolytope, CstrParams, Plant, MIN_TEMPERATURE};

/// Closed interval of admissible scalar references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceWindow {
    pub lo: f64,
    pub hi: f64,
}

impl ReferenceWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("reference window [{lo}, {hi}] must be finite with lo < hi")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn check(&self, v: f64) -> Result<()> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(Error::OutOfWindow { v, lo: self.lo, hi: self.hi })
        }
    }

    /// Euclidean projection onto the window.
    pub fn project(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn diameter(&self) -> f64 {
        self.hi - self.lo
    }

    /// `n` equispaced points including both ends (`n >= 2`).
    pub fn grid(&self, n: usize) -> Vec<f64> {
        let n = n.max(2);
        let step = self.diameter() / (n - 1) as f64;
        (0..n)
            .map(|i| if i == n - 1 { self.hi } else { self.lo + step * i as f64 })
            .collect()
    }
}

/// Maps a scalar reference to its steady state `(h(v), u_ss(v))`.
pub trait SteadyStateMap: Send + Sync + fmt::Debug {
    fn window(&self) -> ReferenceWindow;
    fn state(&self, v: f64) -> Result<DVector<f64>>;
    fn input(&self, v: f64) -> Result<DVector<f64>>;
    /// `(dh/dv, du_ss/dv)`.
    fn derivative(&self, v: f64) -> Result<(DVector<f64>, DVector<f64>)>;
}

/// Closed-form reactor steady states, parameterized by the temperature.
pub fn solve_steady_state(theta: f64, params: &CstrParams) -> Result<(f64, f64)> {
    if !(theta >= MIN_TEMPERATURE) {
        return Err(Error::Domain(format!("reactor temperature {theta} below {MIN_TEMPERATURE}")));
    }
    let denom = params.alpha_f * (theta - params.x_c);
    if denom.abs() < 1e-14 {
        return Err(Error::SingularParameterization { v: theta });
    }
    let e = params.arrhenius(theta);
    let c = 1.0 / (1.0 + params.theta_f * params.k_rate * e);
    let u = ((params.x_f - theta) / params.theta_f + params.k_rate * c * e) / denom;
    Ok((c, u))
}

#[derive(Debug, Clone)]
pub struct CstrSteadyState {
    pub params: CstrParams,
    pub window: ReferenceWindow,
}

impl CstrSteadyState {
    pub fn new(params: CstrParams, window: ReferenceWindow) -> Result<Self> {
        if window.lo <= params.x_c && window.hi >= params.x_c {
            return Err(Error::SingularParameterization { v: params.x_c });
        }
        Ok(Self { params, window })
    }
}

impl SteadyStateMap for CstrSteadyState {
    fn window(&self) -> ReferenceWindow {
        self.window
    }

    fn state(&self, v: f64) -> Result<DVector<f64>> {
        let (c, _) = solve_steady_state(v, &self.params)?;
        Ok(DVector::from_row_slice(&[c, v]))
    }

    fn input(&self, v: f64) -> Result<DVector<f64>> {
        let (_, u) = solve_steady_state(v, &self.params)?;
        Ok(DVector::from_element(1, u))
    }

    fn derivative(&self, v: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let p = &self.params;
        let (c, _) = solve_steady_state(v, p)?;
        let e = p.arrhenius(v);
        let de = e * p.m_act / (v * v);
        let a = p.theta_f * p.k_rate;
        let dc = -a * de / ((1.0 + a * e) * (1.0 + a * e));
        let num = (p.x_f - v) / p.theta_f + p.k_rate * c * e;
        let dnum = -1.0 / p.theta_f + p.k_rate * (dc * e + c * de);
        let den = p.alpha_f * (v - p.x_c);
        let du = (dnum * den - num * p.alpha_f) / (den * den);
        Ok((DVector::from_row_slice(&[dc, 1.0]), DVector::from_element(1, du)))
    }
}

/// Steady states of the shift register: every slot holds `v`, and so does the input.
#[derive(Debug, Clone)]
pub struct RegisterSteadyState {
    pub memory: usize,
    pub window: ReferenceWindow,
}

impl SteadyStateMap for RegisterSteadyState {
    fn window(&self) -> ReferenceWindow {
        self.window
    }

    fn state(&self, v: f64) -> Result<DVector<f64>> {
        Ok(stack_identity(1, self.memory) * DVector::from_element(1, v))
    }

    fn input(&self, v: f64) -> Result<DVector<f64>> {
        Ok(DVector::from_element(1, v))
    }

    fn derivative(&self, _v: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        Ok((DVector::from_element(self.memory, 1.0), DVector::from_element(1, 1.0)))
    }
}

const RICCATI_MAX_ITER: usize = 10_000;

/// Discrete-time LQR by Riccati value iteration. Returns `(K, P)` with `u = K x`.
pub fn dlqr(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Numerical("dlqr dimension mismatch".into()));
    }
    let mut p = q.clone();
    for _ in 0..RICCATI_MAX_ITER {
        let (k, next) = riccati_update(a, b, q, r, &p)?;
        let scale = next.amax().max(1.0);
        let diff = (&next - &p).amax();
        p = next;
        if diff < 1e-12 * scale {
            let p = (&p + p.transpose()) * 0.5;
            return Ok((k, p));
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("Riccati iteration diverged".into()));
        }
    }
    Err(Error::Numerical(format!("Riccati iteration did not converge in {RICCATI_MAX_ITER} iterations")))
}

fn riccati_update(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let at = a.transpose();
    let bt = b.transpose();
    let s = r + &bt * p * b;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::Numerical("R + B'PB is singular".into()))?;
    let k = -(&s_inv * &bt * p * a);
    let next = &at * p * a + &at * p * b * &k + q;
    Ok((k, next))
}

/// Solves `P = A' P A + Q` by fixed-point iteration; requires a Schur-stable `A`.
pub fn dlyap(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = DMatrix::zeros(a.nrows(), 1);
    let r = DMatrix::from_element(1, 1, 1.0);
    dlqr(a, &b, q, &r).map(|(_, p)| p)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// LQR gain and Riccati matrix for the Jacobian linearization at the steady state of `v`.
pub fn synthesize_gain(
    v: f64,
    plant: &dyn Plant,
    ss: &dyn SteadyStateMap,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let fail = |reason: String| Error::Synthesis { v, reason };
    let (a, b) = plant.jacobians(&ss.state(v)?, &ss.input(v)?)?;
    let (k, p) = dlqr(&a, &b, q, r).map_err(|e| fail(e.to_string()))?;
    let rho = spectral_radius(&(&a + &b * &k));
    if !(rho < 1.0) {
        return Err(fail(format!("closed-loop spectral radius {rho} >= 1")));
    }
    Ok((k, p))
}

/// Piecewise-linear schedule of gains `K(v)` and Lyapunov weights `P(v)`.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    grid: Vec<f64>,
    gains: Vec<DMatrix<f64>>,
    weights: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn constant(k: DMatrix<f64>, p: DMatrix<f64>) -> Self {
        Self { grid: vec![0.0], gains: vec![k], weights: vec![p] }
    }

    pub fn from_points(grid: Vec<f64>, gains: Vec<DMatrix<f64>>, weights: Vec<DMatrix<f64>>) -> Result<Self> {
        if grid.is_empty() || grid.len() != gains.len() || grid.len() != weights.len() {
            return Err(Error::Config("gain schedule needs matching, non-empty grid, gains and weights".into()));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("gain schedule grid must be strictly increasing".into()));
        }
        Ok(Self { grid, gains, weights })
    }

    /// Pointwise LQR on `grid_points` equispaced references.
    pub fn lqr(plant: &dyn Plant, ss: &dyn SteadyStateMap, q: &DMatrix<f64>, r: &DMatrix<f64>, grid_points: usize) -> Result<Self> {
        if grid_points < 2 {
            return Err(Error::Config("gain schedule needs at least 2 grid points".into()));
        }
        let grid = ss.window().grid(grid_points);
        let mut gains = Vec::with_capacity(grid.len());
        let mut weights = Vec::with_capacity(grid.len());
        for &v in &grid {
            let (k, p) = synthesize_gain(v, plant, ss, q, r)?;
            gains.push(k);
            weights.push(p);
        }
        Self::from_points(grid, gains, weights)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    fn bracket(&self, v: f64) -> (usize, f64) {
        let n = self.grid.len();
        if n == 1 || v <= self.grid[0] {
            return (0, 0.0);
        }
        if v >= self.grid[n - 1] {
            return (n - 2, 1.0);
        }
        let i = self.grid.partition_point(|g| *g <= v) - 1;
        let w = (v - self.grid[i]) / (self.grid[i + 1] - self.grid[i]);
        (i, w)
    }

    fn blend(&self, mats: &[DMatrix<f64>], v: f64) -> DMatrix<f64> {
        let (i, w) = self.bracket(v);
        if self.grid.len() == 1 || w == 0.0 {
            return mats[i].clone();
        }
        &mats[i] * (1.0 - w) + &mats[i + 1] * w
    }

    pub fn gain(&self, v: f64) -> DMatrix<f64> {
        self.blend(&self.gains, v)
    }

    /// Interpolated and symmetrized Lyapunov weight.
    pub fn weight(&self, v: f64) -> DMatrix<f64> {
        let p = self.blend(&self.weights, v);
        (&p + p.transpose()) * 0.5
    }
}

/// Feedback `g(x, v) = u_ss(v) + K(v) (x - h(v))` with quadratic Lyapunov function.
#[derive(Debug, Clone)]
pub struct TrackingController {
    plant: Arc<dyn Plant>,
    ss: Arc<dyn SteadyStateMap>,
    schedule: GainSchedule,
}

impl TrackingController {
    pub fn new(plant: Arc<dyn Plant>, ss: Arc<dyn SteadyStateMap>, schedule: GainSchedule) -> Self {
        Self { plant, ss, schedule }
    }

    pub fn new_lqr(plant: Arc<dyn Plant>, ss: Arc<dyn SteadyStateMap>, q: &DMatrix<f64>, r: &DMatrix<f64>, grid_points: usize) -> Result<Self> {
        let schedule = GainSchedule::lqr(plant.as_ref(), ss.as_ref(), q, r, grid_points)?;
        Ok(Self::new(plant, ss, schedule))
    }

    /// Constant gain `k` on a linear plant; `P` solves the closed-loop Lyapunov equation with weight `q`.
    pub fn fixed_gain(plant: Arc<dyn Plant>, ss: Arc<dyn SteadyStateMap>, k: DMatrix<f64>, q: &DMatrix<f64>) -> Result<Self> {
        let v = ss.window().lo;
        let (a, b) = plant.jacobians(&ss.state(v)?, &ss.input(v)?)?;
        let acl = &a + &b * &k;
        if !(spectral_radius(&acl) < 1.0) {
            return Err(Error::Synthesis { v, reason: "fixed gain is not stabilizing".into() });
        }
        let p = dlyap(&acl, q)?;
        Ok(Self::new(plant, ss, GainSchedule::constant(k, p)))
    }

    pub fn plant(&self) -> &Arc<dyn Plant> {
        &self.plant
    }

    pub fn steady_state(&self) -> &Arc<dyn SteadyStateMap> {
        &self.ss
    }

    pub fn schedule(&self) -> &GainSchedule {
        &self.schedule
    }

    pub fn window(&self) -> ReferenceWindow {
        self.ss.window()
    }

    pub fn control(&self, x: &DVector<f64>, v: f64) -> Result<DVector<f64>> {
        let h = self.ss.state(v)?;
        let u = self.ss.input(v)?;
        Ok(u + self.schedule.gain(v) * (x - h))
    }

    pub fn closed_loop(&self, x: &DVector<f64>, v: f64) -> Result<DVector<f64>> {
        let u = self.control(x, v)?;
        self.plant.step(x, &u)
    }

    /// `V(x, v) = |x - h(v)|^2_P(v)`.
    pub fn lyapunov(&self, x: &DVector<f64>, v: f64) -> Result<f64> {
        let d = x - self.ss.state(v)?;
        Ok(d.dot(&(self.schedule.weight(v) * &d)))
    }

    /// States `Phi(x, v, 0..=steps)` under constant reference.
    pub fn rollout(&self, x: &DVector<f64>, v: f64, steps: usize) -> Result<Vec<DVector<f64>>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(x.clone());
        for k in 0..steps {
            let next = self.closed_loop(&out[k], v).map_err(|e| e.at_step(k))?;
            out.push(next);
        }
        Ok(out)
    }

    /// Closed-loop constraints frozen at `v`: state box rows followed by the two input rows.
    /// Infinite bounds are dropped.
    pub fn polytope_at(&self, v: f64) -> Result<ConstraintPolytope> {
        let zb = self.plant.constraints();
        let n = self.plant.state_dim();
        let m = self.plant.input_dim();
        let h = self.ss.state(v)?;
        let us = self.ss.input(v)?;
        let k = self.schedule.gain(v);
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            if zb.x_hi[i].is_finite() {
                rows.push((e.clone(), zb.x_hi[i]));
            }
            if zb.x_lo[i].is_finite() {
                rows.push((e.iter().map(|a| -a).collect(), -zb.x_lo[i]));
            }
        }
        for j in 0..m {
            let kj: Vec<f64> = k.row(j).iter().copied().collect();
            let kh: f64 = k.row(j).dot(&h.transpose());
            if zb.u_hi[j].is_finite() {
                rows.push((kj.clone(), zb.u_hi[j] - us[j] + kh));
            }
            if zb.u_lo[j].is_finite() {
                rows.push((kj.iter().map(|a| -a).collect(), us[j] - kh - zb.u_lo[j]));
            }
        }
        let zx = DMatrix::from_fn(rows.len(), n, |r, c| rows[r].0[c]);
        let z = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
        ConstraintPolytope::new(zx, DMatrix::zeros(rows.len(), 1), z)
    }

    /// Spectral radius of the closed-loop Jacobian at the steady state of `v`.
    pub fn spectral_radius(&self, v: f64) -> Result<f64> {
        let (a, b) = self.plant.jacobians(&self.ss.state(v)?, &self.ss.input(v)?)?;
        Ok(spectral_radius(&(a + b * self.schedule.gain(v))))
    }
}

/// Exponential envelope `|Phi(t) - h| <= c * lambda^t * |x - h|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialFit {
    pub c_phi: f64,
    pub lambda: f64,
}

/// Converse-Lyapunov constants derived from an exponential envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConverseConstants {
    pub horizon: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_tilde: f64,
}

/// Smallest `N >= 1` with `c * lambda^N < threshold`.
pub fn converse_horizon(fit: ExponentialFit, threshold: f64) -> Result<usize> {
    if !(fit.lambda < 1.0) {
        return Err(Error::StabilityEstimation { lambda: fit.lambda });
    }
    if !(fit.lambda > 0.0) {
        return Ok(1);
    }
    let mut n = 1usize;
    while fit.c_phi * fit.lambda.powi(n as i32) >= threshold {
        n += 1;
        if n > 1_000_000 {
            return Err(Error::StabilityEstimation { lambda: fit.lambda });
        }
    }
    Ok(n)
}

pub fn converse_constants(fit: ExponentialFit, threshold: f64) -> Result<ConverseConstants> {
    let horizon = converse_horizon(fit, threshold)?;
    let lambda2 = fit.c_phi / (1.0 - fit.lambda);
    let lambda3 = 1.0 - fit.c_phi * fit.lambda.powi(horizon as i32);
    Ok(ConverseConstants {
        horizon,
        lambda1: 1.0,
        lambda2,
        lambda3,
        lambda_tilde: 1.0 - lambda3 / lambda2,
    })
}

/// Envelope values below this are rounding noise of a converged rollout and are not fitted.
pub const ENVELOPE_FLOOR: f64 = 1e-9;

/// Fits the envelope to normalized deviation ratios `ratios[k][t] = |Phi_k(t) - h| / |x_k - h|`.
///
/// Each candidate decay rate gets the smallest admissible `c >= 1`, inflated by `margin`.
/// The pair with the smallest resulting Lyapunov decay factor wins.
pub fn fit_exponential_envelope(ratios: &[Vec<f64>], margin: f64, threshold: f64) -> Result<ExponentialFit> {
    let len = ratios.iter().map(Vec::len).max().unwrap_or(0);
    if len < 2 {
        return Err(Error::Numerical("envelope fit needs rollouts of at least 2 points".into()));
    }
    let mut env = vec![0.0f64; len];
    for row in ratios {
        for (t, r) in row.iter().enumerate() {
            if !r.is_finite() {
                return Err(Error::Numerical("non-finite rollout ratio".into()));
            }
            env[t] = env[t].max(*r);
        }
    }
    let mut best: Option<(f64, ExponentialFit)> = None;
    for i in 1..4000 {
        let lambda = i as f64 / 4000.0;
        let mut c = 1.0f64;
        let mut lp = 1.0f64;
        for &e in &env {
            if e > ENVELOPE_FLOOR {
                c = c.max(e / lp);
            }
            lp *= lambda;
        }
        let fit = ExponentialFit { c_phi: c * margin, lambda };
        if !fit.c_phi.is_finite() {
            continue;
        }
        let Ok(k) = converse_constants(fit, threshold) else { continue };
        if k.horizon >= len {
            continue;
        }
        if best.map_or(true, |(lt, _)| k.lambda_tilde < lt) {
            best = Some((k.lambda_tilde, fit));
        }
    }
    match best {
        Some((_, fit)) => Ok(fit),
        None => Err(Error::StabilityEstimation { lambda: 1.0 }),
    }
}

/// Trajectory-sum Lyapunov function `sum_{i<N} |Phi(x, v, i) - h(v)|`.
#[derive(Debug, Clone)]
pub struct ConverseLyapunov {
    ctrl: Arc<TrackingController>,
    pub fit: ExponentialFit,
    pub constants: ConverseConstants,
}

impl ConverseLyapunov {
    /// Horizon is the smallest `N` with `c * lambda^N < threshold`; `threshold` must lie in `(0, 1]`.
    pub fn build(ctrl: Arc<TrackingController>, fit: ExponentialFit, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::Config(format!("converse threshold {threshold} outside (0, 1]")));
        }
        let constants = converse_constants(fit, threshold)?;
        Ok(Self { ctrl, fit, constants })
    }

    pub fn horizon(&self) -> usize {
        self.constants.horizon
    }

    pub fn evaluate(&self, x: &DVector<f64>, v: f64) -> Result<f64> {
        let h = self.ctrl.steady_state().state(v)?;
        let traj = self.ctrl.rollout(x, v, self.horizon() - 1)?;
        Ok(traj.iter().map(|p| (p - &h).norm()).sum())
    }
}
