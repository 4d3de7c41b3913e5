//! Closed-loop runs, regret accounting, certificate estimation and bound checks.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::governor::{apply, initialize_governor, segment_point, GovernorKind, ALPHA_PASS_SENTINEL};
use crate::oco::{
    benchmark_eta, optimizer_constants, AdversarialCost, CostSchedule, OcoKind, OcoState, RevealedCosts, SteadyStateCost,
    SwitchingCost,
};
use crate::plant::{shift_register_plant, Plant};
use crate::safeset::SafeSet;
use crate::tracking::{
    fit_exponential_envelope, ConverseLyapunov, ExponentialFit, ReferenceWindow, RegisterSteadyState,
    TrackingController,
};

/// Compensated (Neumaier) sum in iteration order.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub r: f64,
    pub v: f64,
    pub eta: f64,
    pub beta: f64,
    /// `|v_t - v_{t-1}|` when the governor modified the reference, else infinite.
    pub alpha: f64,
    pub stage_cost: f64,
    pub ls_r: f64,
    pub ls_v: f64,
    pub ls_eta: f64,
    /// Quadratic Lyapunov value `|x - h(v)|^2_P(v)` and the set threshold it is compared against.
    pub lyapunov: f64,
    pub level: f64,
    /// Worst signed margin of `(x_t, u_t)` in the constraint box.
    pub margin_worst: f64,
}

/// Per-step records of a run, indexed `t = 0, ..., T - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    pub state_names: Vec<String>,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretSummary {
    pub steps: usize,
    pub regret: f64,
    pub regret_oco: f64,
    pub path_length: f64,
    pub eta_path_length: f64,
    pub sum_stage_cost: f64,
    pub sum_ls_r: f64,
    pub sum_ls_eta: f64,
    pub violations: usize,
}

impl RegretLedger {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sum_stage_cost(&self) -> f64 {
        neumaier_sum(self.records.iter().map(|r| r.stage_cost))
    }

    pub fn sum_ls_r(&self) -> f64 {
        neumaier_sum(self.records.iter().map(|r| r.ls_r))
    }

    pub fn sum_ls_eta(&self) -> f64 {
        neumaier_sum(self.records.iter().map(|r| r.ls_eta))
    }

    /// Closed-loop cost minus optimal steady-state cost.
    pub fn regret(&self) -> f64 {
        self.sum_stage_cost() - self.sum_ls_eta()
    }

    /// Steady-state cost of the proposed references minus optimal steady-state cost.
    pub fn regret_oco(&self) -> f64 {
        self.sum_ls_r() - self.sum_ls_eta()
    }

    /// `sum_{t >= 1} |r_t - r_{t-1}|`.
    pub fn path_length(&self) -> f64 {
        neumaier_sum(self.records.windows(2).map(|w| (w[1].r - w[0].r).abs()))
    }

    /// `sum_{t >= 1} |eta_t - eta_{t-1}|`.
    pub fn eta_path_length(&self) -> f64 {
        neumaier_sum(self.records.windows(2).map(|w| (w[1].eta - w[0].eta).abs()))
    }

    pub fn violations(&self) -> usize {
        self.records.iter().filter(|r| !(r.margin_worst >= 0.0)).count()
    }

    pub fn summary(&self) -> RegretSummary {
        RegretSummary {
            steps: self.len(),
            regret: self.regret(),
            regret_oco: self.regret_oco(),
            path_length: self.path_length(),
            eta_path_length: self.eta_path_length(),
            sum_stage_cost: self.sum_stage_cost(),
            sum_ls_r: self.sum_ls_r(),
            sum_ls_eta: self.sum_ls_eta(),
            violations: self.violations(),
        }
    }

    pub fn csv_header(&self) -> String {
        let m = self.records.first().map_or(1, |r| r.u.len());
        let mut cols = vec!["t".to_string()];
        cols.extend(self.state_names.iter().cloned());
        if m == 1 {
            cols.push("u".into());
        } else {
            cols.extend((0..m).map(|i| format!("u{i}")));
        }
        for c in ["r", "v", "eta", "beta", "L_stage", "Ls_r", "Ls_v", "Ls_eta", "V", "level", "margin_worst"] {
            cols.push(c.into());
        }
        cols.join(",")
    }

    /// Trajectory CSV with every float in 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.csv_header())?;
        for r in &self.records {
            let mut line = r.t.to_string();
            let nums = r.x.iter().chain(r.u.iter()).copied().chain([
                r.r,
                r.v,
                r.eta,
                r.beta,
                r.stage_cost,
                r.ls_r,
                r.ls_v,
                r.ls_eta,
                r.lyapunov,
                r.level,
                r.margin_worst,
            ]);
            for v in nums {
                line.push(',');
                line.push_str(&format!("{v:.16e}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Wall-clock seconds spent in the optimizer and in the governor at each step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepTimings {
    pub oco: Vec<f64>,
    pub governor: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub ledger: RegretLedger,
    pub timings: StepTimings,
}

/// Everything a closed-loop run needs besides the algorithm choices.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub set: Arc<SafeSet>,
    pub cost: SteadyStateCost,
    pub x0: DVector<f64>,
    pub r0: f64,
    pub horizon: usize,
}

impl Scenario {
    pub fn controller(&self) -> &Arc<TrackingController> {
        self.set.controller()
    }

    pub fn plant(&self) -> &Arc<dyn Plant> {
        self.controller().plant()
    }

    pub fn schedule(&self) -> &Arc<dyn CostSchedule> {
        self.cost.schedule()
    }

    /// Cost Lipschitz bound over the constraint box for this horizon.
    pub fn cost_lipschitz(&self) -> f64 {
        self.schedule().lipschitz_bound(self.plant().constraints(), self.horizon)
    }
}

/// Runs the loop for `scn.horizon` steps: optimizer proposes `r_t` from costs before `t`,
/// the governor turns it into `v_t`, the feedback applies `u_t = g(x_t, v_t)`.
///
/// `etas` supplies precomputed benchmark references; otherwise each `eta_t` is computed
/// after `r_t` has been committed.
pub fn run_closed_loop(scn: &Scenario, governor: GovernorKind, oco: OcoKind, etas: Option<&[f64]>) -> Result<RunOutput> {
    if scn.horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if let Some(e) = etas {
        if e.len() < scn.horizon {
            return Err(Error::Config(format!("{} benchmark references for horizon {}", e.len(), scn.horizon)));
        }
    }
    let set = scn.set.as_ref();
    let ctrl = set.controller();
    let plant = ctrl.plant();
    let mut gov = initialize_governor(&scn.x0, scn.r0, set).map_err(|e| Error::Run {
        step: 0,
        snapshot: format!("x = {:?}, r0 = {}", scn.x0.as_slice(), scn.r0),
        source: Box::new(e),
    })?;
    let mut opt = OcoState::new(oco, scn.r0);
    let mut x = scn.x0.clone();
    let mut records = Vec::with_capacity(scn.horizon);
    let mut timings = StepTimings::default();
    for t in 0..scn.horizon {
        let v_prev = gov.v_prev;
        let mut r_seen = f64::NAN;
        let step = (|| -> Result<(StepRecord, DVector<f64>)> {
            let t0 = Instant::now();
            let r = opt.propose(&RevealedCosts::new(&scn.cost, t))?;
            let t1 = Instant::now();
            r_seen = r;
            scn.schedule().observe_reference(t, r);
            let t2 = Instant::now();
            let (v, beta) = apply(governor, &x, r, &mut gov, set)?;
            let t3 = Instant::now();
            timings.oco.push((t1 - t0).as_secs_f64());
            timings.governor.push((t3 - t2).as_secs_f64());
            let alpha = gov.alphas.last().copied().unwrap_or(ALPHA_PASS_SENTINEL);
            let u = ctrl.control(&x, v)?;
            let eta = match etas {
                Some(e) => e[t],
                None => benchmark_eta(&scn.cost, t)?,
            };
            let rec = StepRecord {
                t,
                x: x.iter().copied().collect(),
                u: u.iter().copied().collect(),
                r,
                v,
                eta,
                beta,
                alpha,
                stage_cost: scn.schedule().stage_cost(t, &x, &u)?,
                ls_r: scn.cost.eval(t, r)?,
                ls_v: scn.cost.eval(t, v)?,
                ls_eta: scn.cost.eval(t, eta)?,
                lyapunov: ctrl.lyapunov(&x, v)?,
                level: set.level(v)?,
                margin_worst: plant.constraints().worst_margin(&x, &u),
            };
            let next = plant.step(&x, &u)?;
            Ok((rec, next))
        })();
        match step {
            Ok((rec, next)) => {
                records.push(rec);
                x = next;
            }
            Err(e) => {
                return Err(Error::Run {
                    step: t,
                    snapshot: format!("x = {:?}, v_prev = {v_prev}, r = {r_seen}", x.as_slice()),
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(RunOutput { ledger: RegretLedger { state_names: plant.state_names(), records }, timings })
}

/// Knobs of the certificate estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateOptions {
    pub samples: usize,
    pub rollout_steps: usize,
    /// Multiplicative safety margin on the fitted overshoot constant.
    pub fit_margin: f64,
    /// Converse horizon rule: smallest `N` with `c * lambda^N < threshold`.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        Self { samples: 1000, rollout_steps: 6000, fit_margin: 1.02, threshold: 0.5, seed: 7 }
    }
}

/// Estimated constants of the regret bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub l: f64,
    pub l_f: f64,
    pub l_g: f64,
    pub l_h: f64,
    pub l_s: f64,
    pub c_phi: f64,
    pub lambda: f64,
    pub horizon_n: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_tilde: f64,
    pub l_v: f64,
    pub v_bar: f64,
    pub window_diameter: f64,
    pub delta: f64,
    pub mu: f64,
    pub window_m: usize,
    pub epsilon: f64,
    /// Slope of the linear contraction envelope `rho(a) = min(1, slope * a)`.
    pub rho_slope: f64,
    pub c_pl: f64,
    pub c_0: f64,
    pub c_lambda: f64,
    pub c_epsilon: f64,
    pub threshold: f64,
    /// `M` and `epsilon` are constructed, not proven tight.
    pub best_effort: bool,
}

impl Certificate {
    pub fn rho(&self, a: f64) -> f64 {
        (self.rho_slope * a).min(1.0)
    }

    pub fn fit(&self) -> ExponentialFit {
        ExponentialFit { c_phi: self.c_phi, lambda: self.lambda }
    }

    /// Initial-condition constant for a run starting at `(x0, v0)` with first optimum `eta0`.
    pub fn c0_for(&self, x0_gap: f64, v0_gap: f64) -> f64 {
        self.c_lambda * self.l * (1.0 + self.l_g) * (x0_gap + self.l_h * v0_gap)
    }
}

/// `l_s M / eps + l (1 + l_g) l_V (2M + eps) / (eps lambda1 (1 - lambda_tilde))`.
#[allow(clippy::too_many_arguments)]
pub fn path_length_coefficient(l_s: f64, l: f64, l_g: f64, l_v: f64, lambda1: f64, lambda_tilde: f64, m: f64, eps: f64) -> f64 {
    l_s * m / eps + l * (1.0 + l_g) * l_v * (2.0 * m + eps) / (eps * lambda1 * (1.0 - lambda_tilde))
}

/// `N l_h + (N - 1) sum_{k=1}^{N-1} l_f^k`.
pub fn reference_lipschitz(n: usize, l_h: f64, l_f: f64) -> f64 {
    let mut s = 0.0;
    let mut p = 1.0;
    for _ in 1..n {
        p *= l_f;
        s += p;
    }
    n as f64 * l_h + (n as f64 - 1.0) * s
}

/// Smallest `M >= 1` with `lambda_tilde^M * v_bar <= target`.
pub fn averaging_window(lambda_tilde: f64, v_bar: f64, target: f64) -> Result<usize> {
    if !(target > 0.0) {
        return Err(Error::Numerical(format!("averaging target {target} must be positive")));
    }
    if v_bar <= target || lambda_tilde <= 0.0 {
        return Ok(1);
    }
    if !(lambda_tilde < 1.0) {
        return Err(Error::StabilityEstimation { lambda: lambda_tilde });
    }
    let mut m = ((target / v_bar).ln() / lambda_tilde.ln()).ceil().max(1.0) as usize;
    while lambda_tilde.powi(m as i32) * v_bar > target {
        m += 1;
    }
    while m > 1 && lambda_tilde.powi(m as i32 - 1) * v_bar <= target {
        m -= 1;
    }
    Ok(m)
}

fn joint_quotient(
    f: &dyn Fn(&DVector<f64>, f64) -> Result<DVector<f64>>,
    a: (&DVector<f64>, f64),
    b: (&DVector<f64>, f64),
) -> Result<f64> {
    let dist = ((a.0 - b.0).norm_squared() + (a.1 - b.1).powi(2)).sqrt();
    if dist == 0.0 {
        return Ok(0.0);
    }
    Ok((f(a.0, a.1)? - f(b.0, b.1)?).norm() / dist)
}

/// Difference-quotient estimate of the joint Lipschitz constant over the sampled pairs:
/// small random perturbations of each sample plus consecutive sample pairs.
fn lipschitz_over_samples<R: Rng>(
    f: &dyn Fn(&DVector<f64>, f64) -> Result<DVector<f64>>,
    pts: &[(DVector<f64>, f64)],
    window: ReferenceWindow,
    rng: &mut R,
) -> Result<f64> {
    let n = pts.first().map_or(0, |p| p.0.len());
    let mut best = 0.0f64;
    for (x, v) in pts {
        for _ in 0..4 {
            let mut d = DVector::from_fn(n + 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            d /= d.norm().max(f64::MIN_POSITIVE);
            let eps = 1e-6;
            let mut v2 = v + eps * d[n];
            if !window.contains(v2) {
                v2 = v - eps * d[n];
            }
            let x2 = x + d.rows(0, n) * eps;
            best = best.max(joint_quotient(f, (x, *v), (&x2, v2))?);
        }
    }
    for w in pts.windows(2) {
        best = best.max(joint_quotient(f, (&w[0].0, w[0].1), (&w[1].0, w[1].1))?);
    }
    Ok(best)
}

/// Estimates every constant of the regret bound for the loop `set` with cost Lipschitz bound `l`.
///
/// `x0`, `v0` and `eta0` fix the initial-condition constant; the bound on the Lyapunov
/// function along trajectories uses `x0` as the only initial state.
pub fn estimate_certificate(
    set: &SafeSet,
    l: f64,
    opts: CertificateOptions,
    x0: &DVector<f64>,
    v0: f64,
    eta0: f64,
) -> Result<Certificate> {
    let ctrl = set.controller();
    let ss = ctrl.steady_state();
    let window = set.window();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pts = set.sample(&mut rng, opts.samples.max(2), false)?;

    let mut ratios = Vec::with_capacity(pts.len());
    for (x, v) in &pts {
        let h = ss.state(*v)?;
        let d0 = (x - &h).norm();
        if d0 < 1e-12 {
            continue;
        }
        let traj = ctrl.rollout(x, *v, opts.rollout_steps)?;
        ratios.push(traj.iter().map(|p| (p - &h).norm() / d0).collect::<Vec<_>>());
    }
    let fit = fit_exponential_envelope(&ratios, opts.fit_margin, opts.threshold)?;
    let converse = ConverseLyapunov::build(ctrl.clone(), fit, opts.threshold)?;
    let k = converse.constants;

    let mut l_h = 0.0f64;
    let grid = window.grid(2001);
    let hs = grid.iter().map(|&v| ss.state(v)).collect::<Result<Vec<_>>>()?;
    for i in 1..grid.len() {
        l_h = l_h.max((&hs[i] - &hs[i - 1]).norm() / (grid[i] - grid[i - 1]));
    }
    for &v in &grid {
        l_h = l_h.max(ss.derivative(v)?.0.norm());
    }
    let lip_pts = &pts[..pts.len().min(500)];
    let f_cl = |x: &DVector<f64>, v: f64| ctrl.closed_loop(x, v);
    let g_fb = |x: &DVector<f64>, v: f64| ctrl.control(x, v);
    let l_f = lipschitz_over_samples(&f_cl, lip_pts, window, &mut rng)?;
    let l_g = lipschitz_over_samples(&g_fb, lip_pts, window, &mut rng)?;
    let l_s = l * (l_h + l_g + l_g * l_h);
    let l_v = reference_lipschitz(k.horizon, l_h, l_f);

    let d = window.diameter();
    let mut gap = 0.0f64;
    for h in &hs {
        gap = gap.max((x0 - h).norm());
    }
    let lt = k.lambda_tilde;
    let v_bar = k.lambda2 * gap + l_v * d / (1.0 - lt);
    let delta = set.delta();
    let mu = k.lambda1 * delta;
    let window_m = averaging_window(lt, v_bar, k.lambda1 * mu / (4.0 * k.lambda2))?;
    // Both governors move v_prev towards r, so the realized fraction is at least alpha / d.
    let rho_slope = 1.0 / d;
    let rho = |a: f64| (rho_slope * a).min(1.0);
    let epsilon = rho(k.lambda1 * mu / (4.0 * k.lambda2 * l_v * window_m as f64)).min(rho(mu / (2.0 * k.lambda2 * l_h)));
    let m = window_m as f64;
    let c_pl = path_length_coefficient(l_s, l, l_g, l_v, k.lambda1, lt, m, epsilon);
    let c_lambda = k.lambda2 / (k.lambda1 * (1.0 - lt));
    let c_0 = c_lambda * l * (1.0 + l_g) * ((x0 - ss.state(eta0)?).norm() + l_h * (v0 - eta0).abs());
    let cert = Certificate {
        l,
        l_f,
        l_g,
        l_h,
        l_s,
        c_phi: fit.c_phi,
        lambda: fit.lambda,
        horizon_n: k.horizon,
        lambda1: k.lambda1,
        lambda2: k.lambda2,
        lambda3: k.lambda3,
        lambda_tilde: lt,
        l_v,
        v_bar,
        window_diameter: d,
        delta,
        mu,
        window_m,
        epsilon,
        rho_slope,
        c_pl,
        c_0,
        c_lambda,
        c_epsilon: (2.0 * m + epsilon) / epsilon,
        threshold: opts.threshold,
        best_effort: true,
    };
    let finite = [cert.l, cert.l_f, cert.l_g, cert.l_h, cert.l_s, cert.l_v, cert.v_bar, cert.c_pl, cert.c_0];
    if finite.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("certificate has non-finite constants".into()));
    }
    Ok(cert)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundStatus {
    Holds,
    /// Failed, but the bound depends on constructed constants.
    Diagnostic,
    Violation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub status: BoundStatus,
}

impl BoundCheck {
    fn new(lhs: f64, rhs: f64, best_effort: bool) -> Self {
        let margin = rhs - lhs;
        let status = if margin >= 0.0 {
            BoundStatus::Holds
        } else if best_effort {
            BoundStatus::Diagnostic
        } else {
            BoundStatus::Violation
        };
        Self { lhs, rhs, margin, status }
    }

    pub fn holds(&self) -> bool {
        self.status == BoundStatus::Holds
    }
}

/// `R_T <= c_0 + R_T^OCO + c_PL R_T^PL`.
pub fn verify_regret_bound(ledger: &RegretLedger, cert: &Certificate) -> BoundCheck {
    let rhs = cert.c_0 + ledger.regret_oco() + cert.c_pl * ledger.path_length();
    BoundCheck::new(ledger.regret(), rhs, cert.best_effort)
}

/// Optimizer-side bounds for a Q-linearly convergent method with factor `kappa` and unit weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerBounds {
    pub kappa: f64,
    /// `R^OCO <= c~_OCO,0 |r0 - eta0| + c~_OCO sum |d eta|` as displayed.
    pub regret_displayed: BoundCheck,
    /// Same with `1 / (1 - kappa)` as the path coefficient.
    pub regret_unit_path: BoundCheck,
    /// Same with `l_s / (1 - kappa)` as the path coefficient.
    pub regret_patched: BoundCheck,
    pub path_displayed: BoundCheck,
    pub path_patched: BoundCheck,
    /// Closed-loop regret against the optimizer bounds combined with the loop certificate.
    pub closed_loop_displayed: BoundCheck,
    pub closed_loop_patched: BoundCheck,
}

pub fn verify_optimizer_bounds(ledger: &RegretLedger, cert: &Certificate, kappa: f64) -> Result<OptimizerBounds> {
    let k = optimizer_constants(cert.l_s, kappa, &DMatrix::identity(1, 1))?;
    let first = ledger.records.first().ok_or_else(|| Error::Numerical("empty ledger".into()))?;
    let gap0 = (first.r - first.eta).abs();
    let pe = ledger.eta_path_length();
    let r_oco = ledger.regret_oco();
    let r_pl = ledger.path_length();
    let r_t = ledger.regret();
    let strict = |lhs, rhs| BoundCheck::new(lhs, rhs, false);
    Ok(OptimizerBounds {
        kappa,
        regret_displayed: strict(r_oco, k.c_oco0 * gap0 + k.c_oco * pe),
        regret_unit_path: strict(r_oco, cert.l_s * gap0 + pe / (1.0 - kappa)),
        regret_patched: strict(r_oco, k.c_oco0 * gap0 + k.c_oco_patched * pe),
        path_displayed: strict(r_pl, k.c_pl0 * gap0 + k.c_pl * pe),
        path_patched: strict(r_pl, k.c_pl0 * gap0 + k.c_pl_patched * pe),
        closed_loop_displayed: BoundCheck::new(
            r_t,
            cert.c_0 + (k.c_oco0 + cert.c_pl * k.c_pl0) * gap0 + (k.c_oco + cert.c_pl * k.c_pl) * pe,
            cert.best_effort,
        ),
        closed_loop_patched: BoundCheck::new(
            r_t,
            cert.c_0 + (k.c_oco0 + cert.c_pl * k.c_pl0) * gap0 + (k.c_oco_patched + cert.c_pl * k.c_pl_patched) * pe,
            cert.best_effort,
        ),
    })
}

/// Realized contraction `max |r_t - eta_{t-1}| / |r_{t-1} - eta_{t-1}|` over steps with a nonzero gap.
pub fn realized_kappa(ledger: &RegretLedger) -> f64 {
    ledger
        .records
        .windows(2)
        .filter_map(|w| {
            let gap = (w[0].r - w[0].eta).abs();
            (gap > 1e-9).then(|| (w[1].r - w[0].eta).abs() / gap)
        })
        .fold(0.0, f64::max)
}

/// Adversarial run: after each `r_t` the cost becomes the squared distance to its steady state.
/// Returns `(R_T, R_T^OCO, ledger)`.
pub fn adversarial_lower_bound(
    set: Arc<SafeSet>,
    oco: OcoKind,
    horizon: usize,
    x0: DVector<f64>,
    r0: f64,
) -> Result<(f64, f64, RegretLedger)> {
    let ss = set.controller().steady_state().clone();
    let schedule: Arc<dyn CostSchedule> = Arc::new(AdversarialCost::new(ss.clone(), horizon));
    let scn = Scenario { set, cost: SteadyStateCost::new(schedule, ss), x0, r0, horizon };
    let out = run_closed_loop(&scn, GovernorKind::PassThrough, oco, None)?;
    Ok((out.ledger.regret(), out.ledger.regret_oco(), out.ledger))
}

/// Register plant with `p` stored inputs, zero feedback gain, inputs boxed to `u_box`
/// and references restricted to `window`.
pub fn register_controller(p: usize, u_box: (f64, f64), window: ReferenceWindow) -> Result<Arc<TrackingController>> {
    let plant = Arc::new(shift_register_plant(1, p)?.with_input_box(u_box.0, u_box.1)?);
    let ss = Arc::new(RegisterSteadyState { memory: p, window });
    let ctrl = TrackingController::fixed_gain(plant, ss, DMatrix::zeros(1, p), &DMatrix::identity(p, p))?;
    Ok(Arc::new(ctrl))
}

/// Online optimization with memory run through the loop with a pass-through governor.
/// The ledger regret is the memory regret `sum L_t(u_{t-p..t}) - sum min L_t(nu, ..., nu)`.
pub fn oco_m_run(
    p: usize,
    cost: SwitchingCost,
    oco: OcoKind,
    horizon: usize,
    u_box: (f64, f64),
    window: ReferenceWindow,
    r0: f64,
) -> Result<(Scenario, RunOutput)> {
    let ctrl = register_controller(p, u_box, window)?;
    let set = Arc::new(SafeSet::explicit_horizon(ctrl.clone(), p, 201)?);
    let ss = ctrl.steady_state().clone();
    let x0 = ss.state(r0)?;
    let scn = Scenario { set, cost: SteadyStateCost::new(Arc::new(cost), ss), x0, r0, horizon };
    let out = run_closed_loop(&scn, GovernorKind::PassThrough, oco, None)?;
    Ok((scn, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub windows_checked: usize,
    pub recursion_holds: bool,
    pub worst_recursion_slack: f64,
    /// `(tau1, tau2)` of the first failing window.
    pub first_failure: Option<(usize, usize)>,
    pub bound_holds: bool,
    pub max_lyapunov: f64,
    pub v_bar: f64,
    /// Largest product of `1 - rho(alpha_i)` over windows of `M + 1` steps, against `1 - epsilon`.
    pub max_window_product: f64,
    pub one_minus_epsilon: f64,
    /// Smallest realized `beta / alpha` over governor interventions.
    pub realized_rho_slope: Option<f64>,
}

pub const WINDOW_LENGTH: usize = 50;
pub const WINDOW_SLACK: f64 = 1e-9;

/// Checks the Lyapunov recursion over every window of at most `WINDOW_LENGTH` steps,
/// the uniform bound, and reports the averaged-contraction products.
pub fn window_diagnostics(ledger: &RegretLedger, cert: &Certificate, converse: &ConverseLyapunov) -> Result<WindowReport> {
    let vals = ledger
        .records
        .iter()
        .map(|r| converse.evaluate(&DVector::from_column_slice(&r.x), r.v))
        .collect::<Result<Vec<_>>>()?;
    let n = vals.len();
    let lt = cert.lambda_tilde;
    let mut worst = f64::INFINITY;
    let mut first_failure = None;
    let mut windows = 0usize;
    for t1 in 0..n {
        let mut rhs = vals[t1];
        for t2 in t1..n.min(t1 + WINDOW_LENGTH + 1) {
            if t2 > t1 {
                rhs = lt * rhs + cert.l_v * (ledger.records[t2].v - ledger.records[t2 - 1].v).abs();
            }
            windows += 1;
            let slack = rhs + WINDOW_SLACK - vals[t2];
            if slack < worst {
                worst = slack;
            }
            if slack < 0.0 && first_failure.is_none() {
                first_failure = Some((t1, t2));
            }
        }
    }
    let max_v = vals.iter().copied().fold(0.0, f64::max);
    let rho = |a: f64| if a == ALPHA_PASS_SENTINEL { 1.0 } else { cert.rho(a) };
    let span = cert.window_m + 1;
    let mut max_prod = 0.0f64;
    if n >= span {
        for w in ledger.records.windows(span) {
            let prod: f64 = w.iter().map(|r| 1.0 - rho(r.alpha)).product();
            max_prod = max_prod.max(prod);
        }
    }
    let realized = ledger
        .records
        .iter()
        .filter(|r| r.alpha != ALPHA_PASS_SENTINEL && r.alpha > 0.0)
        .map(|r| r.beta / r.alpha)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.min(s))));
    Ok(WindowReport {
        windows_checked: windows,
        recursion_holds: first_failure.is_none(),
        worst_recursion_slack: worst,
        first_failure,
        bound_holds: max_v <= cert.v_bar + WINDOW_SLACK,
        max_lyapunov: max_v,
        v_bar: cert.v_bar,
        max_window_product: max_prod,
        one_minus_epsilon: 1.0 - cert.epsilon,
        realized_rho_slope: realized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub samples: usize,
    pub steps: usize,
    pub constraint_violations: usize,
    pub left_set: usize,
    pub errors: usize,
    /// `(x, v, reason)` of the first failing sample.
    pub counterexample: Option<(Vec<f64>, f64, String)>,
}

impl SoundnessReport {
    pub fn passed(&self) -> bool {
        self.constraint_violations == 0 && self.left_set == 0 && self.errors == 0
    }
}

/// Rolls out sampled members of the set at constant reference and checks the box and the level.
pub fn check_soundness(set: &SafeSet, samples: usize, steps: usize, seed: u64) -> Result<SoundnessReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = set.sample(&mut rng, samples, false)?;
    let ctrl = set.controller();
    let z = ctrl.plant().constraints();
    let mut rep = SoundnessReport { samples, steps, constraint_violations: 0, left_set: 0, errors: 0, counterexample: None };
    for (x0, v) in pts {
        let outcome = (|| -> Result<Option<String>> {
            let level = set.level(v)?;
            let mut x = x0.clone();
            for k in 0..=steps {
                let u = ctrl.control(&x, v)?;
                if !z.contains(&x, &u) {
                    return Ok(Some(format!("constraint violated at step {k}")));
                }
                if level.is_finite() && ctrl.lyapunov(&x, v)? > level {
                    return Ok(Some(format!("left the sublevel set at step {k}")));
                }
                if k < steps {
                    x = ctrl.plant().step(&x, &u)?;
                }
            }
            Ok(None)
        })();
        let reason = match outcome {
            Ok(None) => continue,
            Ok(Some(r)) => {
                if r.starts_with("constraint") {
                    rep.constraint_violations += 1;
                } else {
                    rep.left_set += 1;
                }
                r
            }
            Err(e) => {
                rep.errors += 1;
                format!("rollout error: {e}")
            }
        };
        if rep.counterexample.is_none() {
            rep.counterexample = Some((x0.iter().copied().collect(), v, reason));
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaximalityReport {
    pub instances: usize,
    pub grid_points: usize,
    pub max_beta_error: f64,
    pub pass_through_failures: usize,
    pub non_maximal: usize,
}

impl MaximalityReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_beta_error <= tol && self.pass_through_failures == 0 && self.non_maximal == 0
    }
}

/// Largest grid fraction `i / (n - 1)` whose segment point is admissible, scanning down from 1.
pub fn grid_beta_oracle(set: &SafeSet, x: &DVector<f64>, v_prev: f64, r: f64, n: usize) -> Result<f64> {
    for i in (0..n).rev() {
        let b = i as f64 / (n - 1) as f64;
        if set.contains(x, segment_point(v_prev, r, b))? {
            return Ok(b);
        }
    }
    Ok(0.0)
}

/// Random members `(x, v_prev)` of the set with random references, compared against the grid oracle.
pub fn check_governor_maximality(set: &SafeSet, instances: usize, grid_points: usize, seed: u64) -> Result<MaximalityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = set.sample(&mut rng, instances, false)?;
    let w = set.window();
    let mut rep = MaximalityReport { instances, grid_points, max_beta_error: 0.0, pass_through_failures: 0, non_maximal: 0 };
    for (x, v_prev) in pts {
        let r = rng.random_range(w.lo..=w.hi);
        let mut st = initialize_governor(&x, v_prev, set)?;
        let (_, beta) = apply(GovernorKind::Scalar, &x, r, &mut st, set)?;
        if set.contains(&x, r)? && beta != 1.0 {
            rep.pass_through_failures += 1;
        }
        if beta < 1.0 && set.contains(&x, segment_point(v_prev, r, (beta + 1e-8).min(1.0)))? {
            rep.non_maximal += 1;
        }
        let oracle = grid_beta_oracle(set, &x, v_prev, r, grid_points)?;
        rep.max_beta_error = rep.max_beta_error.max((beta - oracle).abs());
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConverseReport {
    pub samples: usize,
    /// Largest `lambda1 |x - h| - V` and `V - lambda2 |x - h|`.
    pub lower_excess: f64,
    pub upper_excess: f64,
    /// Largest `V(f(x, v), v) - V(x, v) + lambda3 |x - h|`.
    pub decrease_excess: f64,
}

impl ConverseReport {
    pub fn passed(&self, slack: f64) -> bool {
        self.lower_excess <= slack && self.upper_excess <= slack && self.decrease_excess <= slack
    }
}

/// Sandwich and decrease inequalities of the trajectory-sum Lyapunov function on sampled members.
pub fn check_converse(set: &SafeSet, converse: &ConverseLyapunov, samples: usize, seed: u64) -> Result<ConverseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctrl = set.controller();
    let k = converse.constants;
    let mut rep = ConverseReport {
        samples,
        lower_excess: f64::NEG_INFINITY,
        upper_excess: f64::NEG_INFINITY,
        decrease_excess: f64::NEG_INFINITY,
    };
    for (x, v) in set.sample(&mut rng, samples, false)? {
        let d = (&x - ctrl.steady_state().state(v)?).norm();
        let val = converse.evaluate(&x, v)?;
        let next = converse.evaluate(&ctrl.closed_loop(&x, v)?, v)?;
        rep.lower_excess = rep.lower_excess.max(k.lambda1 * d - val);
        rep.upper_excess = rep.upper_excess.max(val - k.lambda2 * d);
        rep.decrease_excess = rep.decrease_excess.max(next - val + k.lambda3 * d);
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallReport {
    pub samples: usize,
    pub delta: f64,
    pub outside: usize,
    pub counterexample: Option<(Vec<f64>, f64)>,
}

/// Points on the sphere of radius `delta` around random steady states must belong to the set.
pub fn check_delta_ball(set: &SafeSet, samples: usize, seed: u64) -> Result<BallReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = set.window();
    let n = set.controller().plant().state_dim();
    let delta = set.delta();
    let mut rep = BallReport { samples, delta, outside: 0, counterexample: None };
    for _ in 0..samples {
        let v = rng.random_range(w.lo..=w.hi);
        let mut d = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        d /= d.norm().max(f64::MIN_POSITIVE);
        let x = set.controller().steady_state().state(v)? + d * delta;
        if !set.contains(&x, v)? {
            rep.outside += 1;
            if rep.counterexample.is_none() {
                rep.counterexample = Some((x.iter().copied().collect(), v));
            }
        }
    }
    Ok(rep)
}
