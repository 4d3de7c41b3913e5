//! Forward-invariant safe sets of state/reference pairs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::ConstraintPolytope;
use crate::tracking::{ReferenceWindow, TrackingController};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SafeSetKind {
    /// `V(x, v) <= V_max` with one uniform level.
    Fixed,
    /// `V(x, v) <= Gamma(v)` with the reference-dependent level.
    Variable,
    /// Constant-reference rollout of `k_star` steps satisfies the raw constraints.
    ExplicitHorizon,
}

impl std::str::FromStr for SafeSetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "variable" => Ok(Self::Variable),
            "explicit-horizon" => Ok(Self::ExplicitHorizon),
            other => Err(Error::Config(format!("unknown safe-set kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for SafeSetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Variable => "variable",
            Self::ExplicitHorizon => "explicit-horizon",
        })
    }
}

/// Calibration data of the uniform level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelCertificate {
    pub v_min: f64,
    pub v_max: f64,
    pub gamma_max: f64,
    /// Worst one-step decrease factor of the quadratic Lyapunov function on the grid (linearized).
    pub contraction: f64,
    /// Steps after which the largest variable level has decayed below `v_min`; `None` if no contraction.
    pub k_star: Option<usize>,
    pub delta: f64,
}

/// Largest level of `|x - h|^2_P` whose sublevel set satisfies every row of `poly`.
///
/// Rows with zero state coefficients and rows with infinite right-hand side are skipped.
pub fn compute_gamma(v: f64, poly: &ConstraintPolytope, h: &DVector<f64>, p: &DMatrix<f64>) -> Result<f64> {
    let p_inv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical(format!("Lyapunov weight singular at v = {v}")))?;
    let vv = DVector::from_element(poly.zv.ncols(), v);
    let margins = &poly.z - &poly.zx * h - &poly.zv * &vv;
    let mut gamma = f64::INFINITY;
    for i in 0..poly.rows() {
        let a = poly.zx.row(i);
        if a.iter().all(|c| *c == 0.0) || !margins[i].is_finite() {
            continue;
        }
        if !(margins[i] > 0.0) {
            return Err(Error::ReferenceInfeasible { v, row: i, margin: margins[i] });
        }
        let w = (a * &p_inv * a.transpose())[(0, 0)];
        gamma = gamma.min(margins[i] * margins[i] / w);
    }
    Ok(gamma)
}

fn lambda_max(p: &DMatrix<f64>) -> f64 {
    p.clone().symmetric_eigenvalues().max()
}

/// One-step decrease factor `max x'A'PAx / x'Px` of the linearized closed loop at `v`.
fn quadratic_contraction(ctrl: &TrackingController, v: f64) -> Result<f64> {
    let ss = ctrl.steady_state();
    let (a, b) = ctrl.plant().jacobians(&ss.state(v)?, &ss.input(v)?)?;
    let acl = a + b * ctrl.schedule().gain(v);
    let p = ctrl.schedule().weight(v);
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("Lyapunov weight not positive definite at v = {v}")))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let m = &l_inv * acl.transpose() * &p * &acl * l_inv.transpose();
    Ok(lambda_max(&((&m + m.transpose()) * 0.5)))
}

/// Uniform level `V_max = min Gamma` over `grid`, with its certificate.
pub fn calibrate_fixed_level(ctrl: &TrackingController, grid: &[f64]) -> Result<(f64, LevelCertificate)> {
    if grid.is_empty() {
        return Err(Error::Config("calibration grid is empty".into()));
    }
    let ss = ctrl.steady_state();
    let mut gammas = Vec::with_capacity(grid.len());
    for &v in grid {
        let g = compute_gamma(v, &ctrl.polytope_at(v)?, &ss.state(v)?, &ctrl.schedule().weight(v))?;
        if !(g > 0.0) {
            return Err(Error::ReferenceInfeasible { v, row: 0, margin: g });
        }
        gammas.push(g);
    }
    let v_max = gammas.iter().copied().fold(f64::INFINITY, f64::min);
    let gamma_max = gammas.iter().copied().fold(0.0, f64::max);
    let mut delta = f64::INFINITY;
    let mut contraction = 0.0f64;
    for &v in grid {
        delta = delta.min((v_max / lambda_max(&ctrl.schedule().weight(v))).sqrt());
        contraction = contraction.max(quadratic_contraction(ctrl, v)?);
    }
    let k_star = settling_steps(contraction, gamma_max, v_max);
    Ok((v_max, LevelCertificate { v_min: v_max, v_max, gamma_max, contraction, k_star, delta }))
}

fn settling_steps(factor: f64, from: f64, to: f64) -> Option<usize> {
    if from <= to {
        return Some(0);
    }
    if !(factor < 1.0) {
        return None;
    }
    if factor <= 0.0 {
        return Some(1);
    }
    Some(((to / from).ln() / factor.ln()).ceil() as usize)
}

/// Safe set `O` together with its membership and cross-section queries.
#[derive(Debug, Clone)]
pub struct SafeSet {
    kind: SafeSetKind,
    ctrl: Arc<TrackingController>,
    window: ReferenceWindow,
    level_scale: f64,
    k_star: usize,
    certificate: Option<LevelCertificate>,
    delta: f64,
}

/// Grid used to calibrate levels and to scan cross sections.
pub const DEFAULT_CALIBRATION_POINTS: usize = 181;
const CROSS_SECTION_SCAN: usize = 451;
const CROSS_SECTION_TOL: f64 = 1e-10;

impl SafeSet {
    /// Level-set construction. `level_scale` multiplies the calibrated level (1 for a sound set).
    pub fn level_set(kind: SafeSetKind, ctrl: Arc<TrackingController>, grid_points: usize, level_scale: f64) -> Result<Self> {
        if kind == SafeSetKind::ExplicitHorizon {
            return Err(Error::Config("explicit-horizon sets are built with SafeSet::explicit_horizon".into()));
        }
        if !(level_scale > 0.0 && level_scale.is_finite()) {
            return Err(Error::Config(format!("level_scale must be positive, got {level_scale}")));
        }
        let window = ctrl.window();
        let grid = window.grid(grid_points);
        let (_, cert) = calibrate_fixed_level(&ctrl, &grid)?;
        let mut set = Self {
            kind,
            ctrl,
            window,
            level_scale,
            k_star: cert.k_star.unwrap_or(0),
            certificate: Some(cert),
            delta: 0.0,
        };
        let mut delta = f64::INFINITY;
        for &v in &grid {
            let lmax = lambda_max(&set.ctrl.schedule().weight(v));
            delta = delta.min((set.level(v)? / lmax).sqrt());
        }
        set.delta = delta;
        Ok(set)
    }

    /// Set of pairs whose `k_star`-step constant-reference rollout keeps `(x, u)` in the raw box.
    ///
    /// Sound only when the state reached after `k_star` steps is a steady state, as for deadbeat
    /// shift registers; `delta` is the smallest steady-state distance to the box over the grid.
    pub fn explicit_horizon(ctrl: Arc<TrackingController>, k_star: usize, grid_points: usize) -> Result<Self> {
        let window = ctrl.window();
        let z = ctrl.plant().constraints().clone();
        let mut delta = f64::INFINITY;
        for v in window.grid(grid_points) {
            let h = ctrl.steady_state().state(v)?;
            let u = ctrl.steady_state().input(v)?;
            let margin = z.worst_margin(&h, &u);
            if !(margin > 0.0) {
                return Err(Error::ReferenceInfeasible { v, row: 0, margin });
            }
            let k_norm = ctrl.schedule().gain(v).norm();
            delta = delta.min(margin / (1.0 + k_norm));
        }
        Ok(Self { kind: SafeSetKind::ExplicitHorizon, ctrl, window, level_scale: 1.0, k_star, certificate: None, delta })
    }

    pub fn kind(&self) -> SafeSetKind {
        self.kind
    }

    pub fn controller(&self) -> &Arc<TrackingController> {
        &self.ctrl
    }

    pub fn window(&self) -> ReferenceWindow {
        self.window
    }

    pub fn certificate(&self) -> Option<&LevelCertificate> {
        self.certificate.as_ref()
    }

    /// Radius of the ball around every grid steady state contained in the set.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn k_star(&self) -> usize {
        self.k_star
    }

    pub fn level_scale(&self) -> f64 {
        self.level_scale
    }

    pub fn gamma(&self, v: f64) -> Result<f64> {
        compute_gamma(v, &self.ctrl.polytope_at(v)?, &self.ctrl.steady_state().state(v)?, &self.ctrl.schedule().weight(v))
    }

    /// Threshold on `V(x, v)`; infinite for explicit-horizon sets.
    pub fn level(&self, v: f64) -> Result<f64> {
        match self.kind {
            SafeSetKind::Fixed => Ok(self.certificate.map_or(0.0, |c| c.v_max) * self.level_scale),
            SafeSetKind::Variable => Ok(self.gamma(v)? * self.level_scale),
            SafeSetKind::ExplicitHorizon => Ok(f64::INFINITY),
        }
    }

    /// Signed membership margin, non-negative iff `(x, v)` is in the set.
    pub fn margin(&self, x: &DVector<f64>, v: f64) -> Result<f64> {
        self.window.check(v)?;
        match self.kind {
            SafeSetKind::Fixed | SafeSetKind::Variable => Ok(self.level(v)? - self.ctrl.lyapunov(x, v)?),
            SafeSetKind::ExplicitHorizon => {
                let z = self.ctrl.plant().constraints();
                let traj = self.ctrl.rollout(x, v, self.k_star)?;
                let mut worst = f64::INFINITY;
                for xt in &traj {
                    let u = self.ctrl.control(xt, v)?;
                    worst = worst.min(z.worst_margin(xt, &u));
                }
                Ok(worst)
            }
        }
    }

    pub fn contains(&self, x: &DVector<f64>, v: f64) -> Result<bool> {
        Ok(self.margin(x, v)? >= 0.0)
    }

    /// Admissible references for state `x` as closed intervals, sorted ascending.
    pub fn cross_section_v(&self, x: &DVector<f64>) -> Result<Vec<(f64, f64)>> {
        let grid = self.window.grid(CROSS_SECTION_SCAN);
        let inside = |v: f64| -> Result<bool> { self.contains(x, v) };
        let flags = grid.iter().map(|&v| inside(v)).collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        let mut i = 0;
        while i < grid.len() {
            if !flags[i] {
                i += 1;
                continue;
            }
            let start = i;
            while i + 1 < grid.len() && flags[i + 1] {
                i += 1;
            }
            let lo = if start == 0 { grid[0] } else { self.refine(&inside, grid[start], grid[start - 1])? };
            let hi = if i == grid.len() - 1 { grid[i] } else { self.refine(&inside, grid[i], grid[i + 1])? };
            out.push((lo, hi));
            i += 1;
        }
        Ok(out)
    }

    /// Bisection between a member `good` and a non-member `bad`; returns a member within tolerance of the edge.
    fn refine(&self, inside: &dyn Fn(f64) -> Result<bool>, mut good: f64, mut bad: f64) -> Result<f64> {
        while (good - bad).abs() > CROSS_SECTION_TOL {
            let mid = 0.5 * (good + bad);
            if inside(mid)? {
                good = mid;
            } else {
                bad = mid;
            }
        }
        Ok(good)
    }

    /// Membership predicate of the state cross-section at `v`.
    pub fn cross_section_x(&self, v: f64) -> impl Fn(&DVector<f64>) -> Result<bool> + '_ {
        move |x| self.contains(x, v)
    }

    /// Draws `(x, v)` pairs in the set: `v` uniform on the window, `x` uniform in the
    /// sublevel ellipsoid, or on its boundary when `boundary` is set.
    /// Explicit-horizon sets are sampled in the certified ball.
    pub fn sample<R: Rng>(&self, rng: &mut R, count: usize, boundary: bool) -> Result<Vec<(DVector<f64>, f64)>> {
        let n = self.ctrl.plant().state_dim();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let v = rng.random_range(self.window.lo..=self.window.hi);
            let h = self.ctrl.steady_state().state(v)?;
            let mut dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = dir.norm();
            if norm == 0.0 {
                dir[0] = 1.0;
            } else {
                dir /= norm;
            }
            let frac: f64 = if boundary { 1.0 } else { rng.random::<f64>().powf(1.0 / n as f64) };
            let x = match self.kind {
                SafeSetKind::ExplicitHorizon => &h + dir * (self.delta * frac),
                _ => {
                    let p = self.ctrl.schedule().weight(v);
                    let l = p
                        .cholesky()
                        .ok_or_else(|| Error::Numerical(format!("Lyapunov weight not positive definite at v = {v}")))?
                        .l();
                    let lt_inv = l
                        .transpose()
                        .try_inverse()
                        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
                    let radius = self.level(v)?.sqrt() * frac;
                    &h + lt_inv * dir * radius
                }
            };
            out.push((self.pull_inside(x, &h, v)?, v));
        }
        Ok(out)
    }

    /// Shrinks a sample towards `h` by a few ulps when rounding left it just outside.
    fn pull_inside(&self, x: DVector<f64>, h: &DVector<f64>, v: f64) -> Result<DVector<f64>> {
        let e = &x - h;
        let mut cand = x;
        let mut shrink = f64::EPSILON;
        for _ in 0..40 {
            if self.contains(&cand, v)? {
                return Ok(cand);
            }
            cand = h + &e * (1.0 - shrink);
            shrink *= 2.0;
        }
        Err(Error::Numerical(format!("sample at v = {v} stays outside the set")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{shift_register_plant, Cstr, Plant};
    use crate::tracking::{CstrSteadyState, RegisterSteadyState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cstr_ctrl() -> Arc<TrackingController> {
        let plant = Arc::new(Cstr::reference());
        let ss = Arc::new(CstrSteadyState::new(plant.params, ReferenceWindow::new(0.4, 0.85).unwrap()).unwrap());
        Arc::new(
            TrackingController::new_lqr(plant, ss, &DMatrix::identity(2, 2), &DMatrix::from_element(1, 1, 0.1), 181).unwrap(),
        )
    }

    fn row_poly(margin: f64) -> ConstraintPolytope {
        ConstraintPolytope::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DMatrix::zeros(1, 1), DVector::from_element(1, margin))
            .unwrap()
    }

    #[test]
    fn gamma_identity_weight() {
        let g = compute_gamma(0.0, &row_poly(0.1), &DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
        assert!((g - 0.01).abs() < 1e-15);
        let g2 = compute_gamma(0.0, &row_poly(0.2), &DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
        assert!((g2 / g - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_skips_zero_rows_and_rejects_infeasible() {
        let poly = ConstraintPolytope::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DVector::from_row_slice(&[5.0, 1.0]),
        )
        .unwrap();
        let g = compute_gamma(0.0, &poly, &DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
        assert!((g - 0.25).abs() < 1e-15);
        assert!(matches!(
            compute_gamma(0.0, &row_poly(-0.1), &DVector::zeros(2), &DMatrix::identity(2, 2)),
            Err(Error::ReferenceInfeasible { row: 0, .. })
        ));
    }

    #[test]
    fn fixed_level_of_single_row() {
        // Constant margin and P = I on the one-slot register: V_max equals the row's Gamma.
        let reg = Arc::new(shift_register_plant(1, 1).unwrap().with_input_box(-1.0, 1.0).unwrap());
        let ss = Arc::new(RegisterSteadyState { memory: 1, window: ReferenceWindow::new(-0.5, 0.5).unwrap() });
        let sched = crate::tracking::GainSchedule::constant(DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
        let ctrl = TrackingController::new(reg, ss, sched);
        let (vmax, cert) = calibrate_fixed_level(&ctrl, &[0.0]).unwrap();
        assert!((vmax - 1.0).abs() < 1e-15);
        assert_eq!(cert.v_min, vmax);
        assert!((cert.delta - 1.0).abs() < 1e-15);
        assert!(calibrate_fixed_level(&ctrl, &[]).is_err());
    }

    #[test]
    fn cstr_levels() {
        let ctrl = cstr_ctrl();
        let fixed = SafeSet::level_set(SafeSetKind::Fixed, ctrl.clone(), 181, 1.0).unwrap();
        let cert = *fixed.certificate().unwrap();
        assert!(cert.v_max > 1e-3 && cert.v_max < 1.0, "{}", cert.v_max);
        assert!(cert.v_min <= cert.v_max && cert.v_max <= cert.gamma_max);
        assert!(cert.delta > 0.0);
        let fine = SafeSet::level_set(SafeSetKind::Fixed, ctrl.clone(), 361, 1.0).unwrap();
        let rel = (fine.certificate().unwrap().v_max - cert.v_max).abs() / cert.v_max;
        assert!(rel < 0.05, "{rel}");
        let var = SafeSet::level_set(SafeSetKind::Variable, ctrl.clone(), 181, 1.0).unwrap();
        for v in ctrl.window().grid(50) {
            assert!(fixed.level(v).unwrap() <= var.level(v).unwrap() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn contains_threshold_is_strict() {
        let ctrl = cstr_ctrl();
        let set = SafeSet::level_set(SafeSetKind::Variable, ctrl.clone(), 181, 1.0).unwrap();
        let v = 0.6;
        let h = ctrl.steady_state().state(v).unwrap();
        assert!(set.contains(&h, v).unwrap());
        let p = ctrl.schedule().weight(v);
        let e = DVector::from_row_slice(&[1.0, 0.0]);
        let base = e.dot(&(&p * &e));
        let on = &h + &e * (set.level(v).unwrap() / base).sqrt();
        let out = &h + &e * (set.level(v).unwrap() * (1.0 + 1e-9) / base).sqrt();
        assert!(!set.contains(&out, v).unwrap());
        assert!(set.margin(&on, v).unwrap().abs() < 1e-12);
        assert!(matches!(set.contains(&h, 0.9), Err(Error::OutOfWindow { .. })));
    }

    #[test]
    fn delta_ball_and_samples_are_members() {
        let ctrl = cstr_ctrl();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [SafeSetKind::Fixed, SafeSetKind::Variable] {
            let set = SafeSet::level_set(kind, ctrl.clone(), 181, 1.0).unwrap();
            for v in ctrl.window().grid(181) {
                let h = ctrl.steady_state().state(v).unwrap();
                for k in 0..8 {
                    let ang = k as f64 * std::f64::consts::FRAC_PI_4;
                    let x = &h + DVector::from_row_slice(&[ang.cos(), ang.sin()]) * set.delta() * (1.0 - 1e-12);
                    assert!(set.contains(&x, v).unwrap());
                }
            }
            for (x, v) in set.sample(&mut rng, 200, false).unwrap() {
                assert!(set.margin(&x, v).unwrap() >= -1e-12);
            }
            for (x, v) in set.sample(&mut rng, 200, true).unwrap() {
                assert!(set.margin(&x, v).unwrap().abs() <= 1e-9 * set.level(v).unwrap());
            }
        }
    }

    #[test]
    fn forward_invariance_on_members() {
        let ctrl = cstr_ctrl();
        let set = SafeSet::level_set(SafeSetKind::Variable, ctrl.clone(), 181, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (x, v) in set.sample(&mut rng, 1000, false).unwrap() {
            let xn = ctrl.closed_loop(&x, v).unwrap();
            assert!(set.contains(&xn, v).unwrap());
        }
    }

    #[test]
    fn cross_section_contains_member_references() {
        let ctrl = cstr_ctrl();
        let set = SafeSet::level_set(SafeSetKind::Fixed, ctrl.clone(), 181, 1.0).unwrap();
        let x = ctrl.steady_state().state(0.6).unwrap();
        let iv = set.cross_section_v(&x).unwrap();
        assert_eq!(iv.len(), 1);
        let (a, b) = iv[0];
        assert!(a < 0.6 && 0.6 < b);
        assert!(set.contains(&x, a).unwrap() && set.contains(&x, b).unwrap());
        if b < 0.85 {
            assert!(!set.contains(&x, b + 2e-10).unwrap());
        }
        if a > 0.4 {
            assert!(!set.contains(&x, a - 2e-10).unwrap());
        }
        let far = DVector::from_row_slice(&[0.9, 0.2]);
        assert!(set.cross_section_v(&far).unwrap().is_empty());
        assert!(set.cross_section_x(0.6)(&x).unwrap());
    }

    #[test]
    fn explicit_horizon_register() {
        let reg = shift_register_plant(1, 2).unwrap().with_input_box(-1.0, 1.0).unwrap();
        let reg = Arc::new(reg);
        let ss = Arc::new(RegisterSteadyState { memory: 2, window: ReferenceWindow::new(-0.9, 0.9).unwrap() });
        let ctrl = Arc::new(TrackingController::fixed_gain(reg.clone(), ss, DMatrix::zeros(1, 2), &DMatrix::identity(2, 2)).unwrap());
        let set = SafeSet::explicit_horizon(ctrl, 2, 181).unwrap();
        assert!((set.delta() - 0.1).abs() < 1e-12);
        assert!(set.contains(&DVector::from_row_slice(&[1.0, -1.0]), 0.9).unwrap());
        assert!(!set.contains(&DVector::from_row_slice(&[1.2, 0.0]), 0.0).unwrap());
        assert_eq!(set.level(0.0).unwrap(), f64::INFINITY);
        assert_eq!(reg.state_dim(), 2);
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("variable".parse::<SafeSetKind>().unwrap(), SafeSetKind::Variable);
        assert!("other".parse::<SafeSetKind>().is_err());
        assert_eq!(SafeSetKind::ExplicitHorizon.to_string(), "explicit-horizon");
    }
}
