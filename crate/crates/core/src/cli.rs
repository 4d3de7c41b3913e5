//! Command-line front end.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{deviations, load_config, Deviation, OcoName, PlantKind, ScenarioConfig};
use crate::error::{Error, Result};
use crate::governor::GovernorKind;
use crate::harness::{
    adversarial_lower_bound, check_converse, check_delta_ball, check_governor_maximality, check_soundness,
    estimate_certificate, window_diagnostics, realized_kappa, run_closed_loop, verify_optimizer_bounds, verify_regret_bound,
    BoundCheck, BoundStatus, Certificate, WindowReport, OptimizerBounds, RegretSummary, RunOutput, Scenario,
};
use crate::oco::{benchmark_etas, estimate_ogd_kappa, OcoKind, OcoState, RevealedCosts, SwitchingCost};
use crate::safeset::{SafeSet, SafeSetKind};
use crate::tracking::{ConverseLyapunov, TrackingController};

#[derive(Debug, Parser)]
#[command(name = "oco-rg", version, about = "Online optimization with reference governors for constrained setpoint tracking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one configuration and write the trajectory CSV and report JSON.
    Simulate(CommonArgs),
    /// Run every optimizer / safe-set combination and tabulate normalized regret and step times.
    Table1(CommonArgs),
    /// Run the property suite.
    Verify(CommonArgs),
    /// Calibrate the controller and safe set and emit the certificate.
    Constants(CommonArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// scalar | command | pass-through
    #[arg(long)]
    pub governor: Option<String>,
    /// fixed | variable | explicit-horizon
    #[arg(long = "safe-set")]
    pub safe_set: Option<String>,
    /// ogd | prev-opt | sequence
    #[arg(long)]
    pub oco: Option<String>,
}

impl CommonArgs {
    /// Loads the scenario and applies command-line overrides.
    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let mut cfg = load_config(&self.config)?;
        if let Some(s) = self.seed {
            cfg.run.seed = s;
            cfg.certificate.seed = s;
        }
        if let Some(g) = &self.governor {
            cfg.governor.kind = g.parse()?;
        }
        if let Some(s) = &self.safe_set {
            cfg.safe_set.kind = s.parse()?;
        }
        if let Some(o) = &self.oco {
            cfg.oco.kind = o.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let args = match &cli.command {
        Command::Simulate(a) | Command::Table1(a) | Command::Verify(a) | Command::Constants(a) => a.clone(),
    };
    let cfg = args.scenario_config()?;
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    fs::create_dir_all(&args.out)?;
    match cli.command {
        Command::Simulate(_) => cmd_simulate(&cfg, &args.out),
        Command::Table1(_) => cmd_table1(&cfg, &args.out),
        Command::Verify(_) => cmd_verify(&cfg, &args.out),
        Command::Constants(_) => cmd_constants(&cfg, &args.out),
    }
}

/// Exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Numerical(format!("json encoding: {e}")))?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Everything shared by runs of one scenario file.
struct Prepared {
    cfg: ScenarioConfig,
    ctrl: Arc<TrackingController>,
    etas: Vec<f64>,
}

impl Prepared {
    fn new(cfg: &ScenarioConfig) -> Result<Self> {
        log::info!("synthesizing controller on {} grid points", cfg.controller.grid_points);
        let ctrl = cfg.build_controller()?;
        let probe = cfg.build_scenario(Arc::new(SafeSet::explicit_horizon(ctrl.clone(), 1, 2)?))?;
        let etas = benchmark_etas(&probe.cost, cfg.run.horizon)?;
        log::info!("benchmark sequence ready for {} steps", etas.len());
        Ok(Self { cfg: cfg.clone(), ctrl, etas })
    }

    fn scenario(&self, kind: SafeSetKind) -> Result<Scenario> {
        self.cfg.build_scenario(self.cfg.build_set(self.ctrl.clone(), kind)?)
    }

    fn certificate(&self, scn: &Scenario) -> Result<Certificate> {
        estimate_certificate(&scn.set, scn.cost_lipschitz(), self.cfg.certificate, &scn.x0, scn.r0, self.etas[0])
    }

    fn run(&self, scn: &Scenario, governor: GovernorKind, oco: OcoKind) -> Result<RunOutput> {
        log::debug!("run: {} governor, {} set, {} optimizer", governor, scn.set.kind(), oco.name());
        let out = run_closed_loop(scn, governor, oco, Some(&self.etas))?;
        log::debug!("run finished: regret {:.6e}, {} violations", out.ledger.regret(), out.ledger.violations());
        Ok(out)
    }
}

#[derive(Debug, Serialize)]
pub struct SimulateReport {
    pub plant: PlantKind,
    pub governor: GovernorKind,
    pub safe_set: SafeSetKind,
    pub oco: OcoKind,
    pub horizon: usize,
    pub seed: u64,
    pub regret: RegretSummary,
    pub certificate: Certificate,
    pub regret_bound: BoundCheck,
    pub optimizer_bounds: Option<OptimizerBounds>,
    pub windows: WindowReport,
    pub deviations: Vec<Deviation>,
}

fn optimizer_bounds(oco: &OcoKind, out: &RunOutput, cert: &Certificate) -> Result<Option<OptimizerBounds>> {
    let kappa = match oco {
        OcoKind::PrevOpt { .. } => 0.0,
        OcoKind::Ogd { .. } => realized_kappa(&out.ledger),
        OcoKind::Sequence { .. } => return Ok(None),
    };
    if kappa >= 1.0 {
        return Ok(None);
    }
    verify_optimizer_bounds(&out.ledger, cert, kappa).map(Some)
}

pub fn simulate_report(cfg: &ScenarioConfig) -> Result<(SimulateReport, RunOutput)> {
    let prep = Prepared::new(cfg)?;
    let scn = prep.scenario(cfg.safe_set.kind)?;
    let oco = cfg.oco.to_kind();
    let out = prep.run(&scn, cfg.governor.kind, oco.clone())?;
    let cert = prep.certificate(&scn)?;
    let converse = ConverseLyapunov::build(prep.ctrl.clone(), cert.fit(), cert.threshold)?;
    let report = SimulateReport {
        plant: cfg.plant.kind,
        governor: cfg.governor.kind,
        safe_set: cfg.safe_set.kind,
        oco: oco.clone(),
        horizon: cfg.run.horizon,
        seed: cfg.run.seed,
        regret: out.ledger.summary(),
        certificate: cert,
        regret_bound: verify_regret_bound(&out.ledger, &cert),
        optimizer_bounds: optimizer_bounds(&oco, &out, &cert)?,
        windows: window_diagnostics(&out.ledger, &cert, &converse)?,
        deviations: deviations(cfg),
    };
    Ok((report, out))
}

pub fn cmd_simulate(cfg: &ScenarioConfig, out_dir: &Path) -> Result<i32> {
    let (report, out) = simulate_report(cfg)?;
    let f = BufWriter::new(fs::File::create(out_dir.join("trajectory.csv"))?);
    out.ledger.write_csv(f)?;
    write_json(&out_dir.join("report.json"), &report)?;
    let s = &report.regret;
    println!(
        "steps {}  regret {:.6e}  oco regret {:.6e}  path length {:.6e}  violations {}",
        s.steps, s.regret, s.regret_oco, s.path_length, s.violations
    );
    Ok(if s.violations == 0 { 0 } else { 1 })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
}

pub fn timing_stats(seconds: &[f64]) -> TimingStats {
    if seconds.is_empty() {
        return TimingStats { mean_ms: 0.0, std_ms: 0.0, median_ms: 0.0 };
    }
    let ms: Vec<f64> = seconds.iter().map(|s| s * 1e3).collect();
    let n = ms.len() as f64;
    let mean = ms.iter().sum::<f64>() / n;
    let var = if ms.len() > 1 { ms.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let mut sorted = ms.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 { 0.5 * (sorted[mid - 1] + sorted[mid]) } else { sorted[mid] };
    TimingStats { mean_ms: mean, std_ms: var.sqrt(), median_ms: median }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub oco: OcoName,
    pub safe_set: SafeSetKind,
    pub regret: Option<f64>,
    pub normalized_percent: Option<f64>,
    pub violations: Option<usize>,
    pub oco_step: Option<TimingStats>,
    pub governor_step: Option<TimingStats>,
    pub error: Option<String>,
}

/// Runs the four optimizer / safe-set combinations on a shared benchmark sequence.
pub fn comparison_rows(cfg: &ScenarioConfig) -> Result<Vec<ComparisonRow>> {
    let prep = Prepared::new(cfg)?;
    let combos: Vec<(OcoName, SafeSetKind)> = [OcoName::Ogd, OcoName::PrevOpt]
        .into_iter()
        .flat_map(|o| [SafeSetKind::Fixed, SafeSetKind::Variable].into_iter().map(move |s| (o, s)))
        .collect();
    let results: Vec<Result<RunOutput>> = combos
        .par_iter()
        .map(|&(o, s)| {
            let mut c = cfg.clone();
            c.oco.kind = o;
            prep.run(&prep.scenario(s)?, cfg.governor.kind, c.oco.to_kind())
        })
        .collect();
    let max = results
        .iter()
        .filter_map(|r| r.as_ref().ok().map(|o| o.ledger.regret()))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(combos
        .iter()
        .zip(results)
        .map(|(&(oco, safe_set), res)| match res {
            Ok(out) => {
                let regret = out.ledger.regret();
                ComparisonRow {
                    oco,
                    safe_set,
                    regret: Some(regret),
                    normalized_percent: Some(100.0 * regret / max),
                    violations: Some(out.ledger.violations()),
                    oco_step: Some(timing_stats(&out.timings.oco)),
                    governor_step: Some(timing_stats(&out.timings.governor)),
                    error: None,
                }
            }
            Err(e) => ComparisonRow {
                oco,
                safe_set,
                regret: None,
                normalized_percent: None,
                violations: None,
                oco_step: None,
                governor_step: None,
                error: Some(e.to_string()),
            },
        })
        .collect())
}

fn name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(str::to_owned)).unwrap_or_default()
}

pub fn cmd_table1(cfg: &ScenarioConfig, out_dir: &Path) -> Result<i32> {
    if cfg.plant.kind != PlantKind::Cstr {
        return Err(Error::Config("table1 needs the reactor plant".into()));
    }
    let rows = comparison_rows(cfg)?;
    let mut csv = BufWriter::new(fs::File::create(out_dir.join("table1.csv"))?);
    writeln!(
        csv,
        "oco,safe_set,regret,normalized_percent,violations,oco_mean_ms,oco_std_ms,oco_median_ms,rg_mean_ms,rg_std_ms,rg_median_ms,error"
    )?;
    println!(
        "{:<9} {:<9} {:>12} {:>10}  {:>24} {:>24}",
        "oco", "safe set", "regret", "normalized", "OCO step ms (mean±std, med)", "RG step ms (mean±std, med)"
    );
    let fmt_t = |t: &Option<TimingStats>| {
        t.map_or("-".into(), |t| format!("{:.4}±{:.4}, {:.4}", t.mean_ms, t.std_ms, t.median_ms))
    };
    let mut failed = false;
    for r in &rows {
        failed |= r.error.is_some() || r.violations.is_some_and(|v| v > 0);
        let num = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.16e}"));
        let t = |v: &Option<TimingStats>| {
            v.map_or(",,".into(), |t| format!("{:.6},{:.6},{:.6}", t.mean_ms, t.std_ms, t.median_ms))
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            name(&r.oco),
            r.safe_set,
            num(r.regret),
            num(r.normalized_percent),
            r.violations.map_or(String::new(), |v| v.to_string()),
            t(&r.oco_step),
            t(&r.governor_step),
            r.error.clone().unwrap_or_default().replace(',', ";")
        )?;
        println!(
            "{:<9} {:<9} {:>12} {:>10}  {:>24} {:>24}",
            name(&r.oco),
            r.safe_set.to_string(),
            r.regret.map_or("failed".into(), |x| format!("{x:.4}")),
            r.normalized_percent.map_or("-".into(), |x| format!("{x:.2}%")),
            fmt_t(&r.oco_step),
            fmt_t(&r.governor_step)
        );
    }
    csv.flush()?;
    write_json(&out_dir.join("table1.json"), &rows)?;
    if failed {
        log::error!("table incomplete or with violations");
        eprintln!("table incomplete or with violations");
    }
    Ok(if failed { 1 } else { 0 })
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub category: String,
    pub name: String,
    pub passed: bool,
    /// Diagnostic checks depend on constructed constants and do not fail the suite.
    pub diagnostic: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn check(category: &str, name: &str, passed: bool, diagnostic: bool, detail: String) -> CheckResult {
    CheckResult { category: category.into(), name: name.into(), passed, diagnostic, detail }
}

fn failure(category: &str, name: &str, e: Error) -> CheckResult {
    check(category, name, false, false, format!("error: {e}"))
}

type Job<'a> = Box<dyn Fn() -> Vec<CheckResult> + Send + Sync + 'a>;

fn steady_state_check(prep: &Prepared) -> Vec<CheckResult> {
    let res = (|| -> Result<f64> {
        let ss = prep.ctrl.steady_state();
        let mut worst = 0.0f64;
        for v in ss.window().grid(201) {
            let h = ss.state(v)?;
            let next = prep.ctrl.plant().step(&h, &ss.input(v)?)?;
            worst = worst.max((next - h).amax());
        }
        Ok(worst)
    })();
    vec![match res {
        Ok(w) => check("plant", "steady states are fixed points", w < 1e-12, false, format!("max residual {w:.3e}")),
        Err(e) => failure("plant", "steady states are fixed points", e),
    }]
}

fn set_checks(prep: &Prepared, set: &SafeSet) -> Vec<CheckResult> {
    let v = &prep.cfg.verify;
    let seed = prep.cfg.run.seed;
    let tag = set.kind().to_string();
    let mut out = Vec::new();
    let soundness = format!("{tag}: sampled members stay admissible and invariant");
    out.push(match check_soundness(set, v.soundness_samples, v.soundness_steps, seed) {
        Ok(r) => {
            let detail = match &r.counterexample {
                Some((x, vv, why)) => format!("counterexample x = {x:?}, v = {vv}: {why}"),
                None => format!("{} samples x {} steps", r.samples, r.steps),
            };
            check("safe-set", &soundness, r.passed(), false, detail)
        }
        Err(e) => failure("safe-set", &soundness, e),
    });
    let ball = format!("{tag}: delta-ball around steady states");
    out.push(match check_delta_ball(set, v.soundness_samples, seed) {
        Ok(r) => check(
            "safe-set",
            &ball,
            r.outside == 0,
            false,
            format!("delta = {:.6e}, outside {} of {}, first {:?}", r.delta, r.outside, r.samples, r.counterexample),
        ),
        Err(e) => failure("safe-set", &ball, e),
    });
    if set.kind() != SafeSetKind::ExplicitHorizon {
        let name = format!("{tag}: scalar governor maximality");
        let tol = 1.0 / (v.maximality_grid as f64 - 1.0) + 1e-9;
        out.push(match check_governor_maximality(set, v.maximality_instances, v.maximality_grid, seed) {
            Ok(r) => check("governor", &name, r.passed(tol), false, format!("{r:?}")),
            Err(e) => failure("governor", &name, e),
        });
    }
    out
}

fn causality_check(prep: &Prepared, scn: &Scenario) -> Vec<CheckResult> {
    let res = (|| -> Result<bool> {
        for kind in [OcoKind::Ogd { step: prep.cfg.oco.step }, OcoKind::PrevOpt { tolerance: prep.cfg.oco.tolerance }] {
            let mut st = OcoState::new(kind, scn.r0);
            for t in 0..scn.horizon.min(50) {
                let rc = RevealedCosts::new(&scn.cost, t);
                st.propose(&rc)?;
                if rc.accessed().iter().any(|&i| i >= t) {
                    return Ok(false);
                }
            }
        }
        let rc = RevealedCosts::new(&scn.cost, 3);
        Ok(matches!(rc.eval(3, scn.r0), Err(Error::Causality { .. })))
    })();
    vec![match res {
        Ok(ok) => check("oco", "optimizers only read revealed costs", ok, false, "first 50 steps of ogd and prev-opt".into()),
        Err(e) => failure("oco", "optimizers only read revealed costs", e),
    }]
}

fn run_checks(prep: &Prepared, scn: &Scenario) -> Vec<CheckResult> {
    let cfg = &prep.cfg;
    let res = (|| -> Result<Vec<CheckResult>> {
        let oco = cfg.oco.to_kind();
        let out = prep.run(scn, cfg.governor.kind, oco.clone())?;
        let cert = prep.certificate(scn)?;
        let converse = ConverseLyapunov::build(prep.ctrl.clone(), cert.fit(), cert.threshold)?;
        let mut v = Vec::new();
        let viol = out.ledger.violations();
        v.push(check("loop", "zero constraint violations", viol == 0, false, format!("{viol} violations")));
        let cr = check_converse(&scn.set, &converse, cfg.verify.converse_samples, cfg.run.seed)?;
        v.push(check("lyapunov", "converse sandwich and decrease", cr.passed(1e-9), false, format!("{cr:?}")));
        let lem = window_diagnostics(&out.ledger, &cert, &converse)?;
        v.push(check(
            "lyapunov",
            "recursion over windows and uniform bound",
            lem.recursion_holds && lem.bound_holds,
            false,
            format!(
                "{} windows, worst slack {:.3e}, max V {:.3e} vs bound {:.3e}",
                lem.windows_checked, lem.worst_recursion_slack, lem.max_lyapunov, lem.v_bar
            ),
        ));
        let t1 = verify_regret_bound(&out.ledger, &cert);
        v.push(check("regret", "closed-loop regret bound", t1.holds(), t1.status != BoundStatus::Violation, format!("{t1:?}")));
        if let Some(b) = optimizer_bounds(&oco, &out, &cert)? {
            let strict = matches!(oco, OcoKind::PrevOpt { .. });
            v.push(check(
                "regret",
                "optimizer regret bound (unit path coefficient)",
                b.regret_unit_path.holds(),
                !strict,
                format!("kappa {:.4}: {:?}", b.kappa, b.regret_unit_path),
            ));
            v.push(check(
                "regret",
                "closed-loop bound with optimizer constants",
                b.closed_loop_patched.holds(),
                true,
                format!("{:?}", b.closed_loop_patched),
            ));
        }
        if cfg.plant.kind == PlantKind::ShiftRegister {
            let ledger = &out.ledger;
            let rhs = cert.c_0 + ledger.regret_oco() + cert.c_pl * ledger.path_length();
            v.push(check(
                "memory",
                "memory regret within the loop bound",
                ledger.regret() <= rhs,
                false,
                format!("{:.6e} <= {:.6e}", ledger.regret(), rhs),
            ));
        }
        Ok(v)
    })();
    res.unwrap_or_else(|e| vec![failure("loop", "configured run", e)])
}

fn adversarial_check(prep: &Prepared, scn: &Scenario) -> Vec<CheckResult> {
    let t = prep.cfg.verify.adversarial_horizon.max(2);
    let w = scn.set.window();
    let values: Vec<f64> = (0..t)
        .map(|i| {
            let s = (2.0 * std::f64::consts::PI * i as f64 / 200.0).sin();
            w.lo + w.diameter() * (0.5 + 0.2 * s)
        })
        .collect();
    let r0 = values[0];
    let res = (|| -> Result<(f64, f64)> {
        let x0 = scn.controller().steady_state().state(r0)?;
        let (rt, ro, _) = adversarial_lower_bound(scn.set.clone(), OcoKind::Sequence { values }, t, x0, r0)?;
        Ok((rt, ro))
    })();
    vec![match res {
        Ok((rt, ro)) => check(
            "lower-bound",
            "adversarial costs: closed-loop regret above optimizer regret",
            rt - ro >= -1e-9 * t as f64 && rt > ro,
            false,
            format!("R_T = {rt:.6e}, R_T^OCO = {ro:.6e}"),
        ),
        Err(e) => failure("lower-bound", "adversarial costs", e),
    }]
}

fn kappa_check(prep: &Prepared) -> Vec<CheckResult> {
    let res = estimate_ogd_kappa(prep.ctrl.steady_state().clone(), (50.0, 250.0), (0.27, 0.65), 20, 101, prep.cfg.oco.step);
    vec![match res {
        Ok(k) => check("oco", "gradient step contracts on constant costs", k < 1.0, false, format!("kappa = {k:.6}")),
        Err(e) => failure("oco", "gradient step contraction", e),
    }]
}

fn register_reduction_check(prep: &Prepared, scn: &Scenario) -> Vec<CheckResult> {
    let cost: &SwitchingCost = &prep.cfg.switching;
    let p = prep.cfg.plant.memory;
    let res = (|| -> Result<bool> {
        for t in 0..20 {
            for nu in scn.set.window().grid(9) {
                if scn.cost.eval(t, nu)? != cost.window_cost(t, &vec![nu; p + 1]) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    })();
    vec![match res {
        Ok(ok) => check("memory", "steady-state cost equals diagonal cost", ok, false, "20 steps x 9 points".into()),
        Err(e) => failure("memory", "steady-state cost equals diagonal cost", e),
    }]
}

pub fn verify_report(cfg: &ScenarioConfig) -> Result<VerifyReport> {
    let prep = Prepared::new(cfg)?;
    let scn = prep.scenario(cfg.safe_set.kind)?;
    let mut jobs: Vec<Job> = vec![
        Box::new(|| steady_state_check(&prep)),
        Box::new(|| set_checks(&prep, &scn.set)),
        Box::new(|| causality_check(&prep, &scn)),
        Box::new(|| run_checks(&prep, &scn)),
        Box::new(|| adversarial_check(&prep, &scn)),
    ];
    match cfg.plant.kind {
        PlantKind::Cstr => jobs.push(Box::new(|| kappa_check(&prep))),
        PlantKind::ShiftRegister => jobs.push(Box::new(|| register_reduction_check(&prep, &scn))),
    }
    log::info!("running {} check groups", jobs.len());
    let checks: Vec<CheckResult> = jobs.par_iter().map(|j| j()).collect::<Vec<_>>().into_iter().flatten().collect();
    let passed = checks.iter().all(|c| c.passed || c.diagnostic);
    Ok(VerifyReport { passed, checks })
}

pub fn cmd_verify(cfg: &ScenarioConfig, out_dir: &Path) -> Result<i32> {
    let rep = verify_report(cfg)?;
    for c in &rep.checks {
        let tag = match (c.passed, c.diagnostic) {
            (true, _) => "PASS",
            (false, true) => "DIAG",
            (false, false) => "FAIL",
        };
        println!("{tag} [{}] {}: {}", c.category, c.name, c.detail);
    }
    write_json(&out_dir.join("verify.json"), &rep)?;
    Ok(if rep.passed { 0 } else { 1 })
}

#[derive(Debug, Serialize)]
pub struct ConstantsReport {
    pub safe_set: SafeSetKind,
    pub level_certificate: Option<crate::safeset::LevelCertificate>,
    pub certificate: Certificate,
    pub deviations: Vec<Deviation>,
}

/// Certificate for the configured safe set, plus the set's own level data.
pub fn constants_report(cfg: &ScenarioConfig) -> Result<(ConstantsReport, Scenario)> {
    let prep = Prepared::new(cfg)?;
    let scn = prep.scenario(cfg.safe_set.kind)?;
    let cert = prep.certificate(&scn)?;
    let report = ConstantsReport {
        safe_set: cfg.safe_set.kind,
        level_certificate: scn.set.certificate().copied(),
        certificate: cert,
        deviations: deviations(cfg),
    };
    Ok((report, scn))
}

pub fn cmd_constants(cfg: &ScenarioConfig, out_dir: &Path) -> Result<i32> {
    let (report, scn) = constants_report(cfg)?;
    let cert = report.certificate;
    write_json(&out_dir.join("constants.json"), &report)?;
    let ctrl = scn.controller();
    let sched = ctrl.schedule();
    let n = ctrl.plant().state_dim();
    let mut csv = BufWriter::new(fs::File::create(out_dir.join("constants.csv"))?);
    let mut header = vec!["v".to_string(), "gamma".to_string()];
    header.extend((0..n).map(|j| format!("K_{j}")));
    for i in 0..n {
        header.extend((0..n).map(|j| format!("P_{i}{j}")));
    }
    writeln!(csv, "{}", header.join(","))?;
    for (i, &v) in sched.grid().iter().enumerate() {
        let mut row = vec![format!("{v:.16e}"), format!("{:.16e}", scn.set.gamma(v)?)];
        row.extend(sched.gains()[i].iter().map(|k| format!("{k:.16e}")));
        let p = &sched.weights()[i];
        for r in 0..n {
            row.extend((0..n).map(|c| format!("{:.16e}", p[(r, c)])));
        }
        writeln!(csv, "{}", row.join(","))?;
    }
    csv.flush()?;
    if let Some(lc) = scn.set.certificate() {
        println!("V_max = {:.6e}", lc.v_max);
    }
    println!("lambda_tilde = {:.6}  c_PL = {:.6e}  c_0 = {:.6e}", cert.lambda_tilde, cert.c_pl, cert.c_0);
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_statistics() {
        let s = timing_stats(&[1e-3, 2e-3, 3e-3, 10e-3]);
        assert!((s.mean_ms - 4.0).abs() < 1e-12);
        assert!((s.median_ms - 2.5).abs() < 1e-12);
        // sample deviation: squared deviations 9 + 4 + 1 + 36 over n - 1
        assert!((s.std_ms - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let one = timing_stats(&[5e-3]);
        assert_eq!((one.median_ms, one.std_ms), (5.0, 0.0));
        assert_eq!(timing_stats(&[]).mean_ms, 0.0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::GovernorInfeasible), 1);
    }

    #[test]
    fn overrides_parse_or_reject() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("s.toml");
        fs::write(&p, "[run]\nhorizon = 3\n").unwrap();
        let mut args = CommonArgs {
            config: p,
            out: d.path().into(),
            seed: Some(11),
            jobs: None,
            governor: Some("command".into()),
            safe_set: Some("variable".into()),
            oco: Some("prev-opt".into()),
        };
        let cfg = args.scenario_config().unwrap();
        assert_eq!((cfg.run.seed, cfg.certificate.seed, cfg.run.horizon), (11, 11, 3));
        assert_eq!(cfg.governor.kind, GovernorKind::Command);
        assert_eq!(cfg.safe_set.kind, SafeSetKind::Variable);
        assert_eq!(cfg.oco.kind, OcoName::PrevOpt);
        args.safe_set = Some("explicit-horizon".into());
        assert!(matches!(args.scenario_config(), Err(Error::Config(_))));
    }
}
