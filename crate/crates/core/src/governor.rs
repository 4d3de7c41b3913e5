//! Reference governors: keep `(x_t, v_t)` inside the safe set while tracking `r_t`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safeset::SafeSet;

const BISECTION_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GovernorKind {
    /// Largest step `beta` along the segment from `v_prev` to `r`.
    Scalar,
    /// Projection of `r` onto the admissible cross-section.
    Command,
    /// `v = r`. Only valid when every reference is admissible.
    PassThrough,
}

impl std::str::FromStr for GovernorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Self::Scalar),
            "command" => Ok(Self::Command),
            "pass-through" => Ok(Self::PassThrough),
            other => Err(Error::Config(format!("unknown governor kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for GovernorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Scalar => "scalar",
            Self::Command => "command",
            Self::PassThrough => "pass-through",
        })
    }
}

/// Value logged for `alpha_t` when the reference passed through unchanged.
pub const ALPHA_PASS_SENTINEL: f64 = f64::INFINITY;

#[derive(Debug, Clone, PartialEq)]
pub struct GovernorState {
    pub v_prev: f64,
    /// Step fraction per call; 1 on pass-through. Command governors log `|v - v_prev| / |r - v_prev|`.
    pub betas: Vec<f64>,
    /// `|v_t - v_{t-1}|` when the reference was modified, else the sentinel.
    pub alphas: Vec<f64>,
}

impl GovernorState {
    fn record(&mut self, r: f64, v: f64, beta: f64) {
        self.alphas.push(if v == r { ALPHA_PASS_SENTINEL } else { (v - self.v_prev).abs() });
        self.betas.push(beta);
        self.v_prev = v;
    }
}

/// Checks `(x0, r0)` is safe and starts the governor at `v_prev = r0`.
pub fn initialize_governor(x0: &DVector<f64>, r0: f64, set: &SafeSet) -> Result<GovernorState> {
    let margin = set.margin(x0, r0)?;
    if margin < 0.0 {
        return Err(Error::InitializationInfeasible { r0, margin });
    }
    Ok(GovernorState { v_prev: r0, betas: Vec::new(), alphas: Vec::new() })
}

/// Candidate reference at fraction `beta` of the segment from `from` to `to`.
pub fn segment_point(from: f64, to: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        to
    } else {
        from + beta * (to - from)
    }
}

/// Scalar reference governor. Returns `(v, beta)`; `beta` is exactly 1 on pass-through.
pub fn scalar_rg(x: &DVector<f64>, r: f64, st: &mut GovernorState, set: &SafeSet) -> Result<(f64, f64)> {
    let v_prev = st.v_prev;
    let margin = set.margin(x, v_prev)?;
    if margin < 0.0 {
        return Err(Error::InvarianceViolation { v_prev, margin });
    }
    set.window().check(r)?;
    let beta = if set.contains(x, r)? {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if set.contains(x, segment_point(v_prev, r, mid))? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let v = segment_point(v_prev, r, beta);
    st.record(r, v, beta);
    Ok((v, beta))
}

/// Command governor: nearest admissible reference, smaller one on ties.
pub fn command_governor(x: &DVector<f64>, r: f64, set: &SafeSet) -> Result<f64> {
    set.window().check(r)?;
    let intervals = set.cross_section_v(x)?;
    let mut best: Option<(f64, f64)> = None;
    for (a, b) in intervals {
        let cand = r.clamp(a, b);
        let dist = (cand - r).abs();
        let better = match best {
            None => true,
            Some((bd, bv)) => dist < bd || (dist == bd && cand < bv),
        };
        if better {
            best = Some((dist, cand));
        }
    }
    best.map(|(_, v)| v).ok_or(Error::GovernorInfeasible)
}

/// One governor step of the given kind. Returns `(v, beta)`.
pub fn apply(kind: GovernorKind, x: &DVector<f64>, r: f64, st: &mut GovernorState, set: &SafeSet) -> Result<(f64, f64)> {
    match kind {
        GovernorKind::Scalar => scalar_rg(x, r, st, set),
        GovernorKind::Command => {
            let v = command_governor(x, r, set)?;
            let span = r - st.v_prev;
            let beta = if v == r { 1.0 } else if span == 0.0 { 0.0 } else { (v - st.v_prev) / span };
            st.record(r, v, beta);
            Ok((v, beta))
        }
        GovernorKind::PassThrough => {
            set.window().check(r)?;
            st.record(r, r, 1.0);
            Ok((r, 1.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::Cstr;
    use crate::safeset::SafeSetKind;
    use crate::tracking::{CstrSteadyState, ReferenceWindow, TrackingController};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn set(kind: SafeSetKind) -> SafeSet {
        let plant = Arc::new(Cstr::reference());
        let ss = Arc::new(CstrSteadyState::new(plant.params, ReferenceWindow::new(0.4, 0.85).unwrap()).unwrap());
        let ctrl =
            TrackingController::new_lqr(plant, ss, &DMatrix::identity(2, 2), &DMatrix::from_element(1, 1, 0.1), 181).unwrap();
        SafeSet::level_set(kind, Arc::new(ctrl), 181, 1.0).unwrap()
    }

    fn h(set: &SafeSet, v: f64) -> DVector<f64> {
        set.controller().steady_state().state(v).unwrap()
    }

    #[test]
    fn initialization() {
        let s = set(SafeSetKind::Fixed);
        let x0 = DVector::from_row_slice(&[0.2632, 0.6519]);
        assert_eq!(initialize_governor(&x0, 0.6519, &s).unwrap().v_prev, 0.6519);
        for v in [0.4, 0.55, 0.85] {
            assert!(initialize_governor(&h(&s, v), v, &s).is_ok());
        }
        assert!(matches!(initialize_governor(&h(&s, 0.4), 0.85, &s), Err(Error::InitializationInfeasible { .. })));
    }

    #[test]
    fn pass_through_when_admissible() {
        let s = set(SafeSetKind::Fixed);
        let x = h(&s, 0.6);
        let mut st = initialize_governor(&x, 0.6, &s).unwrap();
        let (v, beta) = scalar_rg(&x, 0.6001, &mut st, &s).unwrap();
        assert_eq!((v, beta), (0.6001, 1.0));
        assert_eq!(st.alphas[0], ALPHA_PASS_SENTINEL);
        assert_eq!(command_governor(&x, 0.6001, &s).unwrap(), 0.6001);
    }

    #[test]
    fn zero_step_when_stuck_on_boundary() {
        let s = set(SafeSetKind::Fixed);
        let v0 = 0.6;
        let c = s.controller();
        let p = c.schedule().weight(v0);
        let e = DVector::from_row_slice(&[1.0, 0.0]);
        let x = h(&s, v0) + &e * (s.level(v0).unwrap() / e.dot(&(&p * &e))).sqrt() * (1.0 - 1e-13);
        assert!(s.margin(&x, v0).unwrap() >= 0.0);
        // Step towards the side where V grows: no admissible move exists.
        let dv = c.lyapunov(&x, v0 + 1e-7).unwrap() - c.lyapunov(&x, v0 - 1e-7).unwrap();
        let r = if dv > 0.0 { 0.85 } else { 0.4 };
        let mut st = GovernorState { v_prev: v0, betas: vec![], alphas: vec![] };
        let (v, beta) = scalar_rg(&x, r, &mut st, &s).unwrap();
        assert!(beta < 1e-9, "{beta}");
        assert!((v - v0).abs() < 1e-9);
        assert!(!s.contains(&x, segment_point(v0, r, beta + 1e-8)).unwrap());
        let outside = h(&s, 0.6) + DVector::from_row_slice(&[0.3, 0.0]);
        assert!(matches!(scalar_rg(&outside, 0.5, &mut st, &s), Err(Error::InvarianceViolation { .. })));
    }

    #[test]
    fn interior_case_matches_grid() {
        let s = set(SafeSetKind::Variable);
        let x = h(&s, 0.5);
        let mut st = initialize_governor(&x, 0.5, &s).unwrap();
        let (_, beta) = scalar_rg(&x, 0.85, &mut st, &s).unwrap();
        assert!(beta > 0.0 && beta < 1.0);
        let n = 100_000;
        let oracle = (0..=n)
            .rev()
            .map(|i| i as f64 / n as f64)
            .find(|&b| s.contains(&x, segment_point(0.5, 0.85, b)).unwrap())
            .unwrap();
        assert!((beta - oracle).abs() <= 1.0 / n as f64 + 1e-10);
    }

    #[test]
    fn projection_onto_interval() {
        let s = set(SafeSetKind::Fixed);
        let x = h(&s, 0.6);
        let iv = s.cross_section_v(&x).unwrap();
        let (a, b) = iv[0];
        assert_eq!(command_governor(&x, 0.85, &s).unwrap(), b.min(0.85));
        assert_eq!(command_governor(&x, 0.4, &s).unwrap(), a.max(0.4));
        let far = DVector::from_row_slice(&[0.95, 0.2]);
        assert!(matches!(command_governor(&far, 0.6, &s), Err(Error::GovernorInfeasible)));
    }

    #[test]
    fn governors_agree_on_intervals() {
        let s = set(SafeSetKind::Fixed);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (x, v_prev) in s.sample(&mut rng, 40, false).unwrap() {
            let r = rng.random_range(0.4..=0.85);
            let iv = s.cross_section_v(&x).unwrap();
            if iv.len() != 1 {
                continue;
            }
            let mut st = GovernorState { v_prev, betas: vec![], alphas: vec![] };
            let (v1, _) = scalar_rg(&x, r, &mut st, &s).unwrap();
            let v2 = command_governor(&x, r, &s).unwrap();
            assert!((v1 - v2).abs() < 1e-9, "{v1} {v2}");
        }
    }

    #[test]
    fn monotone_approach_and_passthrough_kind() {
        let s = set(SafeSetKind::Fixed);
        let x = h(&s, 0.5);
        let mut st = initialize_governor(&x, 0.5, &s).unwrap();
        let (v, _) = apply(GovernorKind::Scalar, &x, 0.8, &mut st, &s).unwrap();
        assert!((0.8 - v).abs() <= (0.8f64 - 0.5).abs());
        let (v, b) = apply(GovernorKind::PassThrough, &x, 0.8, &mut st, &s).unwrap();
        assert_eq!((v, b), (0.8, 1.0));
        assert!(apply(GovernorKind::PassThrough, &x, 0.9, &mut st, &s).is_err());
        assert_eq!("command".parse::<GovernorKind>().unwrap(), GovernorKind::Command);
        assert!("x".parse::<GovernorKind>().is_err());
    }
}
