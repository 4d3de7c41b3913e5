//! Discrete-time plant models and their constraint sets.
//!
//! Two plants ship: the normalized continuous stirred tank reactor (Euler
//! discretized) and the shift-register system that turns online optimization
//! with memory into a control problem.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible reactor temperature; keeps `exp(-M/theta)` defined.
pub const MIN_TEMPERATURE: f64 = 1e-6;

/// A deterministic discrete-time system `x+ = f(x, u)`.
pub trait Plant: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn sampling_time(&self) -> f64;
    fn initial_state(&self) -> DVector<f64>;
    fn constraints(&self) -> &ConstraintBox;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// Column labels used in trajectory files.
    fn state_names(&self) -> Vec<String> {
        (0..self.state_dim()).map(|i| format!("x{i}")).collect()
    }

    /// Jacobians `(df/dx, df/du)` at `(x, u)`. Defaults to central differences.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        for j in 0..n {
            let h = 1e-6 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (self.step(&xp, u)? - self.step(&xm, u)?) / (2.0 * h);
            a.set_column(j, &col);
        }
        for j in 0..m {
            let h = 1e-6 * u[j].abs().max(1.0);
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let col = (self.step(x, &up)? - self.step(x, &um)?) / (2.0 * h);
            b.set_column(j, &col);
        }
        Ok((a, b))
    }
}

/// Box constraint `(x, u) in Z` on raw states and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBox {
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
}

impl ConstraintBox {
    pub fn new(x_lo: Vec<f64>, x_hi: Vec<f64>, u_lo: Vec<f64>, u_hi: Vec<f64>) -> Result<Self> {
        if x_lo.len() != x_hi.len() || u_lo.len() != u_hi.len() {
            return Err(Error::Config("constraint bound dimensions disagree".into()));
        }
        let ordered = x_lo.iter().zip(&x_hi).chain(u_lo.iter().zip(&u_hi)).all(|(lo, hi)| lo <= hi);
        if !ordered {
            return Err(Error::Config("constraint lower bound exceeds upper bound".into()));
        }
        Ok(Self {
            x_lo: DVector::from_vec(x_lo),
            x_hi: DVector::from_vec(x_hi),
            u_lo: DVector::from_vec(u_lo),
            u_hi: DVector::from_vec(u_hi),
        })
    }

    /// Smallest slack over all rows; negative means violated.
    pub fn worst_margin(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut worst = f64::INFINITY;
        for i in 0..x.len() {
            worst = worst.min(x[i] - self.x_lo[i]).min(self.x_hi[i] - x[i]);
        }
        for i in 0..u.len() {
            worst = worst.min(u[i] - self.u_lo[i]).min(self.u_hi[i] - u[i]);
        }
        worst
    }

    pub fn contains(&self, x: &DVector<f64>, u: &DVector<f64>) -> bool {
        self.worst_margin(x, u) >= 0.0
    }
}

/// Closed-loop constraint set `{(x, v) : Zx x + Zv v <= z}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintPolytope {
    pub zx: DMatrix<f64>,
    pub zv: DMatrix<f64>,
    pub z: DVector<f64>,
}

impl ConstraintPolytope {
    pub fn new(zx: DMatrix<f64>, zv: DMatrix<f64>, z: DVector<f64>) -> Result<Self> {
        if zx.nrows() != z.len() || zv.nrows() != z.len() {
            return Err(Error::Config("polytope row counts disagree".into()));
        }
        Ok(Self { zx, zv, z })
    }

    pub fn rows(&self) -> usize {
        self.z.len()
    }

    /// Per-row slack `z - Zx x - Zv v`.
    pub fn slack(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.z - &self.zx * x - &self.zv * v
    }

    /// Worst row and its slack. An empty polytope reports `(0, +inf)`.
    pub fn worst_row(&self, x: &DVector<f64>, v: &DVector<f64>) -> (usize, f64) {
        self.slack(x, v)
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, s)| if s < acc.1 { (i, s) } else { acc })
    }

    pub fn contains(&self, x: &DVector<f64>, v: &DVector<f64>) -> bool {
        self.worst_row(x, v).1 >= 0.0
    }
}

/// Normalized reactor parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CstrParams {
    pub theta_f: f64,
    pub k_rate: f64,
    pub m_act: f64,
    pub x_f: f64,
    pub x_c: f64,
    pub alpha_f: f64,
    pub tau: f64,
}

impl Default for CstrParams {
    fn default() -> Self {
        Self {
            theta_f: 20.0,
            k_rate: 300.0,
            m_act: 5.0,
            x_f: 0.3947,
            x_c: 0.3816,
            alpha_f: 0.117,
            tau: 0.1,
        }
    }
}

impl CstrParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("theta_f", self.theta_f),
            ("k_rate", self.k_rate),
            ("m_act", self.m_act),
            ("x_f", self.x_f),
            ("x_c", self.x_c),
            ("alpha_f", self.alpha_f),
            ("tau", self.tau),
        ];
        for (name, value) in all {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("cstr.{name} must be finite and > 0, got {value}")));
            }
        }
        Ok(())
    }

    /// Arrhenius factor `exp(-M / theta)`.
    pub fn arrhenius(&self, theta: f64) -> f64 {
        (-self.m_act / theta).exp()
    }
}

/// Continuous-time reactor dynamics `(dc/dt, dtheta/dt)`.
pub fn cstr_continuous_rhs(c: f64, theta: f64, u: f64, params: &CstrParams) -> Result<(f64, f64)> {
    if !(theta >= MIN_TEMPERATURE) {
        return Err(Error::Domain(format!(
            "reactor temperature {theta} below {MIN_TEMPERATURE}"
        )));
    }
    let reaction = params.k_rate * c * params.arrhenius(theta);
    let dc = (1.0 - c) / params.theta_f - reaction;
    let dtheta = (params.x_f - theta) / params.theta_f + reaction - params.alpha_f * u * (theta - params.x_c);
    if !(dc.is_finite() && dtheta.is_finite()) {
        return Err(Error::Domain(format!("non-finite derivative at c={c}, theta={theta}, u={u}")));
    }
    Ok((dc, dtheta))
}

/// Forward Euler update `x + tau * dx`.
pub fn euler_step(x: &DVector<f64>, dx: &DVector<f64>, tau: f64) -> DVector<f64> {
    x + dx * tau
}

/// Euler-discretized stirred tank reactor with state `(c, theta)` and coolant input `u`.
#[derive(Debug, Clone)]
pub struct Cstr {
    pub params: CstrParams,
    x0: DVector<f64>,
    constraints: ConstraintBox,
}

impl Cstr {
    pub fn new(params: CstrParams, x0: [f64; 2], constraints: ConstraintBox) -> Result<Self> {
        params.validate()?;
        if constraints.x_lo.len() != 2 || constraints.u_lo.len() != 1 {
            return Err(Error::Config("reactor constraints must bound 2 states and 1 input".into()));
        }
        Ok(Self {
            params,
            x0: DVector::from_row_slice(&x0),
            constraints,
        })
    }

    /// The reactor with its reference parameters, `x0 = (0.2632, 0.6519)` and `Z = [0,1]^2 x [0,2]`.
    pub fn reference() -> Self {
        let z = ConstraintBox::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0], vec![2.0]).expect("static box");
        Self::new(CstrParams::default(), [0.2632, 0.6519], z).expect("static parameters")
    }

    pub fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let (dc, dth) = cstr_continuous_rhs(x[0], x[1], u[0], &self.params)?;
        Ok(DVector::from_row_slice(&[dc, dth]))
    }
}

impl Plant for Cstr {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn sampling_time(&self) -> f64 {
        self.params.tau
    }

    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }

    fn constraints(&self) -> &ConstraintBox {
        &self.constraints
    }

    fn state_names(&self) -> Vec<String> {
        vec!["c".into(), "theta".into()]
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if !(x.iter().all(|v| v.is_finite()) && u.iter().all(|v| v.is_finite())) {
            return Err(Error::Domain("non-finite state or input".into()));
        }
        Ok(euler_step(x, &self.rhs(x, u)?, self.params.tau))
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let p = &self.params;
        let (c, th, u) = (x[0], x[1], u[0]);
        if !(th >= MIN_TEMPERATURE) {
            return Err(Error::Domain(format!("reactor temperature {th} below {MIN_TEMPERATURE}")));
        }
        let e = p.arrhenius(th);
        let de = e * p.m_act / (th * th);
        let tau = p.tau;
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0 + tau * (-1.0 / p.theta_f - p.k_rate * e),
                tau * (-p.k_rate * c * de),
                tau * (p.k_rate * e),
                1.0 + tau * (-1.0 / p.theta_f + p.k_rate * c * de - p.alpha_f * u),
            ],
        );
        let b = DMatrix::from_row_slice(2, 1, &[0.0, -tau * p.alpha_f * (th - p.x_c)]);
        Ok((a, b))
    }
}

/// Linear shift register whose state stacks the last `p` inputs `(u_{t-p}, ..., u_{t-1})`.
#[derive(Debug, Clone)]
pub struct ShiftRegister {
    m: usize,
    p: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    x0: DVector<f64>,
    constraints: ConstraintBox,
}

impl ShiftRegister {
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn memory(&self) -> usize {
        self.p
    }

    /// `p`-fold vertical stack of `m x m` identities.
    pub fn stack_matrix(&self) -> DMatrix<f64> {
        stack_identity(self.m, self.p)
    }

    pub fn with_initial_state(mut self, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != self.m * self.p {
            return Err(Error::Config(format!("register state must have {} entries", self.m * self.p)));
        }
        self.x0 = x0;
        Ok(self)
    }

    /// Box every stored input and the applied input to `[u_lo, u_hi]`.
    pub fn with_input_box(mut self, u_lo: f64, u_hi: f64) -> Result<Self> {
        let np = self.m * self.p;
        self.constraints = ConstraintBox::new(vec![u_lo; np], vec![u_hi; np], vec![u_lo; self.m], vec![u_hi; self.m])?;
        Ok(self)
    }
}

pub(crate) fn stack_identity(m: usize, p: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(m * p, m);
    for blk in 0..p {
        for i in 0..m {
            h[(blk * m + i, i)] = 1.0;
        }
    }
    h
}

/// Builds the shift-register plant for memory length `p` and input dimension `m`.
pub fn shift_register_plant(m: usize, p: usize) -> Result<ShiftRegister> {
    if m == 0 || p == 0 {
        return Err(Error::Config("shift register needs m >= 1 and p >= 1".into()));
    }
    let n = m * p;
    let mut a = DMatrix::zeros(n, n);
    for blk in 0..p - 1 {
        for i in 0..m {
            a[(blk * m + i, (blk + 1) * m + i)] = 1.0;
        }
    }
    let mut b = DMatrix::zeros(n, m);
    for i in 0..m {
        b[((p - 1) * m + i, i)] = 1.0;
    }
    let inf = f64::INFINITY;
    let constraints = ConstraintBox::new(vec![-inf; n], vec![inf; n], vec![-inf; m], vec![inf; m])?;
    Ok(ShiftRegister {
        m,
        p,
        a,
        b,
        x0: DVector::zeros(n),
        constraints,
    })
}

impl Plant for ShiftRegister {
    fn state_dim(&self) -> usize {
        self.m * self.p
    }

    fn input_dim(&self) -> usize {
        self.m
    }

    fn sampling_time(&self) -> f64 {
        1.0
    }

    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }

    fn constraints(&self) -> &ConstraintBox {
        &self.constraints
    }

    fn state_names(&self) -> Vec<String> {
        (1..=self.p)
            .rev()
            .flat_map(|lag| (0..self.m).map(move |i| if self.m == 1 { format!("u_lag{lag}") } else { format!("u{i}_lag{lag}") }))
            .collect()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() || u.len() != self.m {
            return Err(Error::Domain("shift register dimension mismatch".into()));
        }
        Ok(&self.a * x + &self.b * u)
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }
}
