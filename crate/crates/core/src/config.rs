//! Scenario files: TOML with one section per component. Missing keys take the reactor defaults.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::governor::GovernorKind;
use crate::harness::{register_controller, CertificateOptions, Scenario};
use crate::oco::{CostSchedule, CstrCostParams, CstrCostSchedule, OcoKind, SteadyStateCost, SwitchingCost};
use crate::plant::{ConstraintBox, Cstr, CstrParams};
use crate::safeset::{SafeSet, SafeSetKind};
use crate::tracking::{CstrSteadyState, ReferenceWindow, TrackingController};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    Cstr,
    ShiftRegister,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSection {
    pub kind: PlantKind,
    pub cstr: CstrParams,
    /// Number of stored inputs of the shift register.
    pub memory: usize,
    /// Initial state; defaults to the reactor start point or to `h(r0)` for the register.
    pub x0: Option<Vec<f64>>,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self { kind: PlantKind::Cstr, cstr: CstrParams::default(), memory: 1, x0: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintSection {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: f64,
    pub u_hi: f64,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        Self { x_lo: vec![0.0, 0.0], x_hi: vec![1.0, 1.0], u_lo: 0.0, u_hi: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub lo: f64,
    pub hi: f64,
    pub r0: f64,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        Self { lo: 0.4, hi: 0.85, r0: 0.6519 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub q_diag: Vec<f64>,
    pub r: f64,
    pub grid_points: usize,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self { q_diag: vec![1.0, 1.0], r: 0.1, grid_points: 181 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafeSetSection {
    pub kind: SafeSetKind,
    pub grid_points: usize,
    /// Multiplier on the calibrated level; anything above 1 is unsound.
    pub level_scale: f64,
}

impl Default for SafeSetSection {
    fn default() -> Self {
        Self { kind: SafeSetKind::Fixed, grid_points: 181, level_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcoName {
    Ogd,
    PrevOpt,
    Sequence,
}

impl std::str::FromStr for OcoName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ogd" => Ok(Self::Ogd),
            "prev-opt" => Ok(Self::PrevOpt),
            "sequence" => Ok(Self::Sequence),
            other => Err(Error::Config(format!("unknown oco kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcoSection {
    pub kind: OcoName,
    pub step: f64,
    pub tolerance: f64,
    pub values: Vec<f64>,
}

impl Default for OcoSection {
    fn default() -> Self {
        Self { kind: OcoName::Ogd, step: crate::oco::DEFAULT_OGD_STEP, tolerance: crate::oco::DEFAULT_GRAD_TOL, values: vec![] }
    }
}

impl OcoSection {
    pub fn to_kind(&self) -> OcoKind {
        match self.kind {
            OcoName::Ogd => OcoKind::Ogd { step: self.step },
            OcoName::PrevOpt => OcoKind::PrevOpt { tolerance: self.tolerance },
            OcoName::Sequence => OcoKind::Sequence { values: self.values.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GovernorSection {
    pub kind: GovernorKind,
}

impl Default for GovernorSection {
    fn default() -> Self {
        Self { kind: GovernorKind::Scalar }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub horizon: usize,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { horizon: 2400, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub soundness_samples: usize,
    pub soundness_steps: usize,
    pub maximality_instances: usize,
    pub maximality_grid: usize,
    pub converse_samples: usize,
    pub adversarial_horizon: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            soundness_samples: 2000,
            soundness_steps: 50,
            maximality_instances: 100,
            maximality_grid: 10_001,
            converse_samples: 1000,
            adversarial_horizon: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub plant: PlantSection,
    pub constraints: ConstraintSection,
    pub reference: ReferenceSection,
    pub controller: ControllerSection,
    pub safe_set: SafeSetSection,
    pub governor: GovernorSection,
    pub oco: OcoSection,
    pub cost: CstrCostParams,
    pub switching: SwitchingCost,
    pub run: RunSection,
    pub certificate: CertificateOptions,
    pub verify: VerifySection,
}

/// Parsing failure with a location when the parser reports one.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
        let loc = e.span().map(|s| {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: ")
        });
        Error::Config(format!("{}{}", loc.unwrap_or_default(), e.message()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run.horizon < 1 {
            return bad("run.horizon must be at least 1".into());
        }
        let w = ReferenceWindow::new(self.reference.lo, self.reference.hi)?;
        if !w.contains(self.reference.r0) {
            return bad(format!("reference.r0 = {} outside [{}, {}]", self.reference.r0, w.lo, w.hi));
        }
        if !(self.safe_set.level_scale > 0.0 && self.safe_set.level_scale.is_finite()) {
            return bad("safe_set.level_scale must be positive".into());
        }
        if self.safe_set.grid_points < 2 || self.controller.grid_points < 2 {
            return bad("grid_points must be at least 2".into());
        }
        match self.oco.kind {
            OcoName::Ogd if !(self.oco.step > 0.0 && self.oco.step.is_finite()) => {
                return bad("oco.step must be positive".into())
            }
            OcoName::PrevOpt if !(self.oco.tolerance > 0.0) => return bad("oco.tolerance must be positive".into()),
            OcoName::Sequence if self.oco.values.is_empty() => return bad("oco.values must not be empty".into()),
            _ => {}
        }
        match self.plant.kind {
            PlantKind::Cstr => {
                self.plant.cstr.validate()?;
                self.cost.validate()?;
                if self.constraints.x_lo.len() != 2 || self.constraints.x_hi.len() != 2 {
                    return bad("constraints.x_lo / x_hi need 2 entries for the reactor".into());
                }
                if self.controller.q_diag.len() != 2 {
                    return bad("controller.q_diag needs 2 entries for the reactor".into());
                }
                if let Some(x0) = &self.plant.x0 {
                    if x0.len() != 2 {
                        return bad("plant.x0 needs 2 entries for the reactor".into());
                    }
                }
                if self.safe_set.kind == SafeSetKind::ExplicitHorizon {
                    return bad("explicit-horizon sets are only sound for the shift register".into());
                }
                if !(self.controller.r > 0.0) {
                    return bad("controller.r must be positive".into());
                }
            }
            PlantKind::ShiftRegister => {
                if self.plant.memory < 1 {
                    return bad("plant.memory must be at least 1".into());
                }
                if !(self.constraints.u_lo < self.constraints.u_hi) {
                    return bad("constraints.u_lo must be below u_hi".into());
                }
                if w.lo < self.constraints.u_lo || w.hi > self.constraints.u_hi {
                    return bad("reference window must lie inside the input box".into());
                }
                if self.safe_set.kind != SafeSetKind::ExplicitHorizon {
                    return bad("the shift register uses safe_set.kind = \"explicit-horizon\"".into());
                }
                if let Some(x0) = &self.plant.x0 {
                    if x0.len() != self.plant.memory {
                        return bad(format!("plant.x0 needs {} entries", self.plant.memory));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn window(&self) -> ReferenceWindow {
        ReferenceWindow { lo: self.reference.lo, hi: self.reference.hi }
    }

    /// Plant, feedback and Lyapunov schedule; shared by every safe-set and algorithm choice.
    pub fn build_controller(&self) -> Result<Arc<TrackingController>> {
        let w = self.window();
        match self.plant.kind {
            PlantKind::Cstr => {
                let c = &self.constraints;
                let z = ConstraintBox::new(c.x_lo.clone(), c.x_hi.clone(), vec![c.u_lo], vec![c.u_hi])?;
                let x0 = self.plant.x0.clone().unwrap_or(vec![0.2632, 0.6519]);
                let plant = Arc::new(Cstr::new(self.plant.cstr, [x0[0], x0[1]], z)?);
                let ss = Arc::new(CstrSteadyState::new(self.plant.cstr, w)?);
                let q = DMatrix::from_diagonal(&DVector::from_column_slice(&self.controller.q_diag));
                let r = DMatrix::from_element(1, 1, self.controller.r);
                Ok(Arc::new(TrackingController::new_lqr(plant, ss, &q, &r, self.controller.grid_points)?))
            }
            PlantKind::ShiftRegister => {
                register_controller(self.plant.memory, (self.constraints.u_lo, self.constraints.u_hi), w)
            }
        }
    }

    pub fn build_set(&self, ctrl: Arc<TrackingController>, kind: SafeSetKind) -> Result<Arc<SafeSet>> {
        Ok(Arc::new(match kind {
            SafeSetKind::ExplicitHorizon => SafeSet::explicit_horizon(ctrl, self.plant.memory, self.safe_set.grid_points)?,
            k => SafeSet::level_set(k, ctrl, self.safe_set.grid_points, self.safe_set.level_scale)?,
        }))
    }

    pub fn build_schedule(&self) -> Result<Arc<dyn CostSchedule>> {
        Ok(match self.plant.kind {
            PlantKind::Cstr => Arc::new(CstrCostSchedule::new(self.cost.clone(), self.plant.cstr.tau)?),
            PlantKind::ShiftRegister => Arc::new(self.switching.clone()),
        })
    }

    pub fn build_scenario(&self, set: Arc<SafeSet>) -> Result<Scenario> {
        let ctrl = set.controller().clone();
        let ss = ctrl.steady_state().clone();
        let x0 = match (&self.plant.x0, self.plant.kind) {
            (Some(x), _) => DVector::from_column_slice(x),
            (None, PlantKind::Cstr) => ctrl.plant().initial_state(),
            (None, PlantKind::ShiftRegister) => ss.state(self.reference.r0)?,
        };
        Ok(Scenario {
            set,
            cost: SteadyStateCost::new(self.build_schedule()?, ss),
            x0,
            r0: self.reference.r0,
            horizon: self.run.horizon,
        })
    }
}

/// Machine-readable record of where the run departs from the reference experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub id: String,
    pub detail: String,
}

pub fn deviations(cfg: &ScenarioConfig) -> Vec<Deviation> {
    let d = |id: &str, detail: String| Deviation { id: id.into(), detail };
    let mut out = vec![
        d("indexing", format!("records cover t = 0..{} ({} steps); sums run over those steps", cfg.run.horizon - 1, cfg.run.horizon)),
        d(
            "optimizer-bound-coefficient",
            "Q-linear regret bound checked with 1/(1-kappa) and l_s/(1-kappa) on the optimizer path length besides the displayed kappa/(1-kappa)".into(),
        ),
        d("contraction-envelope", "rho(a) = min(1, a / diameter) from the segment structure of both governors".into()),
    ];
    if cfg.plant.kind == PlantKind::Cstr {
        out.push(d(
            "controller-synthesis",
            format!(
                "gain-scheduled LQR on {} grid points with Q = diag({:?}), R = {}; quadratic Lyapunov weight from the Riccati solution",
                cfg.controller.grid_points, cfg.controller.q_diag, cfg.controller.r
            ),
        ));
        out.push(d("weight-period", format!("q_t sinusoid period {} s", cfg.cost.q_period_s)));
    }
    if cfg.safe_set.level_scale != 1.0 {
        out.push(d("level-scale", format!("safe-set level multiplied by {}", cfg.safe_set.level_scale)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_reference_experiment() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        assert_eq!(cfg.run.horizon, 2400);
        assert_eq!(cfg.plant.cstr, CstrParams::default());
        assert_eq!(cfg.cost.cbar_knots.len(), 4);
    }

    #[test]
    fn unknown_field_reports_line() {
        let err = parse_config("[run]\nhorizon = 10\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse_config("[run]\nhorizon = 0\n").is_err());
        assert!(parse_config("[reference]\nr0 = 0.9\n").is_err());
        assert!(parse_config("[oco]\nkind = \"newton\"\n").is_err());
        assert!(parse_config("[safe_set]\nkind = \"explicit-horizon\"\n").is_err());
        assert!(parse_config("[oco]\nkind = \"sequence\"\n").is_err());
    }

    #[test]
    fn register_config_builds() {
        let text = "[plant]\nkind = \"shift-register\"\nmemory = 1\n[constraints]\nx_lo = []\nx_hi = []\nu_lo = -1.0\nu_hi = 1.0\n\
                    [reference]\nlo = -0.9\nhi = 0.9\nr0 = 0.0\n[safe_set]\nkind = \"explicit-horizon\"\n[governor]\nkind = \"pass-through\"\n";
        let cfg = parse_config(text).unwrap();
        let ctrl = cfg.build_controller().unwrap();
        let set = cfg.build_set(ctrl, cfg.safe_set.kind).unwrap();
        assert!((set.delta() - 0.1).abs() < 1e-12);
        let scn = cfg.build_scenario(set).unwrap();
        assert_eq!(scn.x0.as_slice(), &[0.0]);
    }
}
