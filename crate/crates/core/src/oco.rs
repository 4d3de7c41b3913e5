//! Time-varying costs, steady-state costs and online optimization of the reference.

use std::cell::RefCell;
use std::fmt;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::ConstraintBox;
use crate::tracking::{ReferenceWindow, SteadyStateMap};

/// Sequence of stage costs `L_t(x, u)` revealed one step at a time.
pub trait CostSchedule: Send + Sync + fmt::Debug {
    fn stage_cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64>;

    /// `(dL/dx, dL/du)` at `(x, u)`.
    fn stage_gradient(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)>;

    /// Upper bound on the Lipschitz constant of every `L_t`, `t < horizon`, over the box.
    fn lipschitz_bound(&self, z: &ConstraintBox, horizon: usize) -> f64;

    /// Hook called right after the reference for step `t` is committed.
    fn observe_reference(&self, _t: usize, _r: f64) {}
}

/// Weighting and target concentration schedule of the reactor experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CstrCostParams {
    pub q_offset: f64,
    pub q_amplitude: f64,
    /// Period of the weighting sinusoid in seconds.
    pub q_period_s: f64,
    /// `(time in seconds, target concentration)` knots, linearly interpolated and held outside.
    pub cbar_knots: Vec<(f64, f64)>,
}

impl Default for CstrCostParams {
    fn default() -> Self {
        Self {
            q_offset: 150.0,
            q_amplitude: 100.0,
            q_period_s: 240.0,
            cbar_knots: vec![(0.0, 0.27), (90.0, 0.65), (180.0, 0.65), (240.0, 0.3)],
        }
    }
}

impl CstrCostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_period_s > 0.0 && self.q_period_s.is_finite()) {
            return Err(Error::Config("cost.q_period_s must be positive".into()));
        }
        if self.cbar_knots.is_empty() {
            return Err(Error::Config("cost.cbar_knots must not be empty".into()));
        }
        if self.cbar_knots.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::Config("cost.cbar_knots times must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// `L_t(x, u) = q_t (c - cbar_t)^2 + u^2` with `c = x[0]`.
#[derive(Debug, Clone)]
pub struct CstrCostSchedule {
    params: CstrCostParams,
    tau: f64,
}

impl CstrCostSchedule {
    pub fn new(params: CstrCostParams, tau: f64) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, tau })
    }

    /// Time-invariant cost with fixed weighting and target.
    pub fn constant(q: f64, cbar: f64) -> Self {
        Self {
            params: CstrCostParams { q_offset: q, q_amplitude: 0.0, q_period_s: 1.0, cbar_knots: vec![(0.0, cbar)] },
            tau: 1.0,
        }
    }

    pub fn q(&self, t: usize) -> f64 {
        let p = &self.params;
        let phase = 2.0 * std::f64::consts::PI * self.tau * t as f64 / p.q_period_s;
        p.q_offset - p.q_amplitude * phase.sin()
    }

    pub fn cbar(&self, t: usize) -> f64 {
        let s = self.tau * t as f64;
        let k = &self.params.cbar_knots;
        if s <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((s0, c0), (s1, c1)) = (w[0], w[1]);
            if s < s1 {
                return c0 + (c1 - c0) * (s - s0) / (s1 - s0);
            }
        }
        k[k.len() - 1].1
    }
}

impl CostSchedule for CstrCostSchedule {
    fn stage_cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let d = x[0] - self.cbar(t);
        Ok(self.q(t) * d * d + u[0] * u[0])
    }

    fn stage_gradient(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let mut gx = DVector::zeros(x.len());
        gx[0] = 2.0 * self.q(t) * (x[0] - self.cbar(t));
        Ok((gx, DVector::from_element(1, 2.0 * u[0])))
    }

    fn lipschitz_bound(&self, z: &ConstraintBox, horizon: usize) -> f64 {
        let gu = 2.0 * z.u_lo[0].abs().max(z.u_hi[0].abs());
        (0..horizon.max(1))
            .map(|t| {
                let cb = self.cbar(t);
                let gc = 2.0 * self.q(t).abs() * (z.x_lo[0] - cb).abs().max((z.x_hi[0] - cb).abs());
                gc.hypot(gu)
            })
            .fold(0.0, f64::max)
    }
}

/// Tracking cost with switching penalty for a shift register:
/// `L_t = w (u - theta_t)^2 + s (u - u_prev)^2`, `u_prev` the newest register slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchingCost {
    pub tracking_weight: f64,
    pub switching_weight: f64,
    pub target_offset: f64,
    pub target_amplitude: f64,
    /// Period of the sinusoidal target, in steps.
    pub target_period: f64,
}

impl Default for SwitchingCost {
    fn default() -> Self {
        Self { tracking_weight: 1.0, switching_weight: 1.0, target_offset: 0.0, target_amplitude: 0.6, target_period: 200.0 }
    }
}

impl SwitchingCost {
    pub fn target(&self, t: usize) -> f64 {
        self.target_offset + self.target_amplitude * (2.0 * std::f64::consts::PI * t as f64 / self.target_period).sin()
    }

    /// The cost on the full window `(u_{t-p}, ..., u_{t-1}, u_t)`.
    pub fn window_cost(&self, t: usize, inputs: &[f64]) -> f64 {
        let u = inputs[inputs.len() - 1];
        let prev = if inputs.len() > 1 { inputs[inputs.len() - 2] } else { u };
        self.tracking_weight * (u - self.target(t)).powi(2) + self.switching_weight * (u - prev).powi(2)
    }
}

impl CostSchedule for SwitchingCost {
    fn stage_cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let mut w: Vec<f64> = x.iter().copied().collect();
        w.push(u[0]);
        Ok(self.window_cost(t, &w))
    }

    fn stage_gradient(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = x.len();
        let prev = x[n - 1];
        let ds = 2.0 * self.switching_weight * (u[0] - prev);
        let mut gx = DVector::zeros(n);
        gx[n - 1] = -ds;
        let gu = 2.0 * self.tracking_weight * (u[0] - self.target(t)) + ds;
        Ok((gx, DVector::from_element(1, gu)))
    }

    fn lipschitz_bound(&self, z: &ConstraintBox, _horizon: usize) -> f64 {
        let umax = z.u_lo[0].abs().max(z.u_hi[0].abs());
        let theta_max = self.target_offset.abs() + self.target_amplitude.abs();
        let ds = 4.0 * self.switching_weight.abs() * umax;
        let du = 2.0 * self.tracking_weight.abs() * (umax + theta_max) + ds;
        du.hypot(ds)
    }
}

/// Costs chosen after each reference is committed: `|x - h(r_t)|^2 + |u - u_ss(r_t)|^2`.
#[derive(Debug)]
pub struct AdversarialCost {
    ss: Arc<dyn SteadyStateMap>,
    targets: Mutex<Vec<Option<f64>>>,
}

impl AdversarialCost {
    pub fn new(ss: Arc<dyn SteadyStateMap>, horizon: usize) -> Self {
        Self { ss, targets: Mutex::new(vec![None; horizon]) }
    }

    fn target(&self, t: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        let r = self
            .targets
            .lock()
            .map_err(|_| Error::Numerical("adversarial cost lock poisoned".into()))?
            .get(t)
            .copied()
            .flatten()
            .ok_or(Error::Causality { requested: t, now: t })?;
        Ok((self.ss.state(r)?, self.ss.input(r)?))
    }
}

impl CostSchedule for AdversarialCost {
    fn stage_cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let (h, us) = self.target(t)?;
        Ok((x - h).norm_squared() + (u - us).norm_squared())
    }

    fn stage_gradient(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let (h, us) = self.target(t)?;
        Ok(((x - h) * 2.0, (u - us) * 2.0))
    }

    fn lipschitz_bound(&self, z: &ConstraintBox, _horizon: usize) -> f64 {
        let wx = (&z.x_hi - &z.x_lo).norm_squared();
        let wu = (&z.u_hi - &z.u_lo).norm_squared();
        2.0 * (wx + wu).sqrt()
    }

    fn observe_reference(&self, t: usize, r: f64) {
        if let Ok(mut g) = self.targets.lock() {
            if t < g.len() {
                g[t] = Some(r);
            }
        }
    }
}

/// `L^s_t(v) = L_t(h(v), u_ss(v))` with its analytic derivative.
#[derive(Debug, Clone)]
pub struct SteadyStateCost {
    schedule: Arc<dyn CostSchedule>,
    ss: Arc<dyn SteadyStateMap>,
}

impl SteadyStateCost {
    pub fn new(schedule: Arc<dyn CostSchedule>, ss: Arc<dyn SteadyStateMap>) -> Self {
        Self { schedule, ss }
    }

    pub fn schedule(&self) -> &Arc<dyn CostSchedule> {
        &self.schedule
    }

    pub fn window(&self) -> ReferenceWindow {
        self.ss.window()
    }

    pub fn eval(&self, t: usize, v: f64) -> Result<f64> {
        self.schedule.stage_cost(t, &self.ss.state(v)?, &self.ss.input(v)?)
    }

    pub fn grad(&self, t: usize, v: f64) -> Result<f64> {
        let (gx, gu) = self.schedule.stage_gradient(t, &self.ss.state(v)?, &self.ss.input(v)?)?;
        let (dh, du) = self.ss.derivative(v)?;
        Ok(gx.dot(&dh) + gu.dot(&du))
    }
}

/// Cost access for the optimizer at time `now`: only indices `< now` are visible.
#[derive(Debug)]
pub struct RevealedCosts<'a> {
    cost: &'a SteadyStateCost,
    now: usize,
    log: RefCell<Vec<usize>>,
}

impl<'a> RevealedCosts<'a> {
    pub fn new(cost: &'a SteadyStateCost, now: usize) -> Self {
        Self { cost, now, log: RefCell::new(Vec::new()) }
    }

    pub fn now(&self) -> usize {
        self.now
    }

    fn admit(&self, idx: usize) -> Result<()> {
        self.log.borrow_mut().push(idx);
        if idx >= self.now {
            return Err(Error::Causality { requested: idx, now: self.now });
        }
        Ok(())
    }

    pub fn eval(&self, idx: usize, v: f64) -> Result<f64> {
        self.admit(idx)?;
        self.cost.eval(idx, v)
    }

    pub fn grad(&self, idx: usize, v: f64) -> Result<f64> {
        self.admit(idx)?;
        self.cost.grad(idx, v)
    }

    pub fn window(&self) -> ReferenceWindow {
        self.cost.window()
    }

    /// Every index requested so far, including rejected ones.
    pub fn accessed(&self) -> Vec<usize> {
        self.log.borrow().clone()
    }
}

pub const ORACLE_GRID_POINTS: usize = 2001;
const GOLDEN_WIDTH: f64 = 1e-10;

/// Global minimizer of a scalar function over the window: grid scan, golden-section
/// refinement of the best cell, then a gradient root polish to `grad_tol`.
pub fn global_minimize(
    f: impl Fn(f64) -> Result<f64>,
    df: impl Fn(f64) -> Result<f64>,
    window: ReferenceWindow,
    grad_tol: f64,
) -> Result<f64> {
    let grid = window.grid(ORACLE_GRID_POINTS);
    let mut best = (f64::INFINITY, 0usize);
    for (i, &v) in grid.iter().enumerate() {
        let fv = f(v)?;
        if !fv.is_finite() {
            return Err(Error::Numerical(format!("non-finite cost at v = {v}")));
        }
        if fv < best.0 {
            best = (fv, i);
        }
    }
    let i = best.1;
    let (lo, hi) = (grid[i.saturating_sub(1)], grid[(i + 1).min(grid.len() - 1)]);
    let (mut a, mut b) = (lo, hi);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > GOLDEN_WIDTH {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    let mut arg = 0.5 * (a + b);
    let mut farg = f(arg)?;
    for edge in [lo, hi] {
        let fe = f(edge)?;
        if fe < farg {
            arg = edge;
            farg = fe;
        }
    }
    if let Some(p) = gradient_root(&df, lo, hi, grad_tol)? {
        if f(p)? <= farg {
            arg = p;
        }
    }
    Ok(arg)
}

/// Illinois regula falsi for `df = 0` on `[lo, hi]` when `df(lo) < 0 < df(hi)`.
fn gradient_root(df: &impl Fn(f64) -> Result<f64>, lo: f64, hi: f64, tol: f64) -> Result<Option<f64>> {
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (df(a)?, df(b)?);
    if !(fa < 0.0 && fb > 0.0) {
        return Ok(None);
    }
    let mut side = 0i8;
    for _ in 0..200 {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = df(c)?;
        if fc.abs() < tol || b - a < 1e-15 {
            return Ok(Some(c));
        }
        if fc < 0.0 {
            a = c;
            fa = fc;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            b = c;
            fb = fc;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

/// Gradient tolerance of the previous-optimum algorithm and of the benchmark oracle.
pub const DEFAULT_GRAD_TOL: f64 = 1e-9;
/// Default online gradient step size.
pub const DEFAULT_OGD_STEP: f64 = 2.5e-4;

/// Optimal steady-state reference `eta_t`.
pub fn benchmark_eta(cost: &SteadyStateCost, t: usize) -> Result<f64> {
    global_minimize(|v| cost.eval(t, v), |v| cost.grad(t, v), cost.window(), DEFAULT_GRAD_TOL)
}

/// `eta_0, ..., eta_{horizon-1}` for a schedule that does not depend on the run.
pub fn benchmark_etas(cost: &SteadyStateCost, horizon: usize) -> Result<Vec<f64>> {
    (0..horizon).map(|t| benchmark_eta(cost, t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OcoKind {
    /// Projected gradient step on the previous cost.
    Ogd { step: f64 },
    /// Exact minimizer of the previous cost.
    PrevOpt { tolerance: f64 },
    /// Scripted references (projected onto the window); the last value is held.
    Sequence { values: Vec<f64> },
}

impl OcoKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Ogd { .. } => "ogd",
            Self::PrevOpt { .. } => "prev-opt",
            Self::Sequence { .. } => "sequence",
        }
    }
}

/// Online optimizer state: produces `r_t` from costs `< t`.
#[derive(Debug, Clone)]
pub struct OcoState {
    pub kind: OcoKind,
    pub r_prev: f64,
    t: usize,
}

impl OcoState {
    pub fn new(kind: OcoKind, r0: f64) -> Self {
        Self { kind, r_prev: r0, t: 0 }
    }

    /// Reference for the next time index; the first call returns `r0`.
    pub fn propose(&mut self, costs: &RevealedCosts) -> Result<f64> {
        let t = self.t;
        if costs.now() != t {
            return Err(Error::Causality { requested: t, now: costs.now() });
        }
        let w = costs.window();
        let r = if t == 0 {
            match &self.kind {
                OcoKind::Sequence { values } if !values.is_empty() => w.project(values[0]),
                _ => self.r_prev,
            }
        } else {
            match &self.kind {
                OcoKind::Ogd { step } => ogd_step(self.r_prev, costs.grad(t - 1, self.r_prev)?, *step, w)?,
                OcoKind::PrevOpt { tolerance } => {
                    global_minimize(|v| costs.eval(t - 1, v), |v| costs.grad(t - 1, v), w, *tolerance)?
                }
                OcoKind::Sequence { values } => {
                    let v = values.get(t).or(values.last()).copied().unwrap_or(self.r_prev);
                    w.project(v)
                }
            }
        };
        self.r_prev = r;
        self.t += 1;
        Ok(r)
    }
}

/// `Pi(r - step * grad)` onto the window.
pub fn ogd_step(r_prev: f64, grad: f64, step: f64, window: ReferenceWindow) -> Result<f64> {
    if !grad.is_finite() {
        return Err(Error::Numerical(format!("non-finite gradient {grad} at r = {r_prev}")));
    }
    Ok(window.project(r_prev - step * grad))
}

/// Regret and path-length constants of a Q-linearly convergent optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConstants {
    pub c_kappa: f64,
    pub c_oco0: f64,
    pub c_oco: f64,
    pub c_pl0: f64,
    pub c_pl: f64,
    /// Path-length coefficients with `1 / (1 - kappa)` in place of `kappa / (1 - kappa)`.
    pub c_oco_patched: f64,
    pub c_pl_patched: f64,
}

pub fn optimizer_constants(l_s: f64, kappa: f64, s: &DMatrix<f64>) -> Result<OptimizerConstants> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::Domain(format!("contraction factor {kappa} outside [0, 1)")));
    }
    if !(l_s > 0.0) {
        return Err(Error::Domain(format!("Lipschitz constant {l_s} must be positive")));
    }
    let eig = s.clone().symmetric_eigenvalues();
    let (emin, emax) = (eig.min(), eig.max());
    if !(emin > 0.0) {
        return Err(Error::Domain("weighting matrix must be positive definite".into()));
    }
    let s_half = emax.sqrt();
    let s_neg_half = 1.0 / emin.sqrt();
    let c_kappa = kappa / (1.0 - kappa);
    let c_oco0 = l_s * s_neg_half * (1.0 + c_kappa * s_half);
    let c_oco = l_s * s_neg_half * c_kappa * s_half;
    let c_oco_patched = l_s * s_neg_half * s_half / (1.0 - kappa);
    let pl = (1.0 + kappa) / l_s;
    Ok(OptimizerConstants {
        c_kappa,
        c_oco0,
        c_oco,
        c_pl0: pl * c_oco0,
        c_pl: pl * c_oco,
        c_oco_patched,
        c_pl_patched: pl * c_oco_patched,
    })
}

/// Worst one-step contraction `|ogd(r) - eta| / |r - eta|` of projected gradient descent
/// on constant reactor costs over a `(q, cbar)` grid, with `starts` starting references each.
pub fn estimate_ogd_kappa(
    ss: Arc<dyn SteadyStateMap>,
    q_range: (f64, f64),
    cbar_range: (f64, f64),
    grid: usize,
    starts: usize,
    step: f64,
) -> Result<f64> {
    let w = ss.window();
    let lin = |lo: f64, hi: f64, i: usize| if grid <= 1 { lo } else { lo + (hi - lo) * i as f64 / (grid - 1) as f64 };
    let mut kappa = 0.0f64;
    for i in 0..grid {
        for j in 0..grid {
            let sched = Arc::new(CstrCostSchedule::constant(lin(q_range.0, q_range.1, i), lin(cbar_range.0, cbar_range.1, j)));
            let cost = SteadyStateCost::new(sched, ss.clone());
            let eta = benchmark_eta(&cost, 0)?;
            for r in w.grid(starts) {
                let gap = (r - eta).abs();
                if gap < 1e-6 {
                    continue;
                }
                let next = ogd_step(r, cost.grad(0, r)?, step, w)?;
                kappa = kappa.max((next - eta).abs() / gap);
            }
        }
    }
    Ok(kappa)
}
