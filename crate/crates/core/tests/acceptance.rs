//! Acceptance suite. Runs as a plain binary so every criterion prints one PASS/FAIL line.

use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use oco_rg::config::{load_config, ScenarioConfig};
use oco_rg::governor::{apply, initialize_governor, segment_point, GovernorKind};
use oco_rg::harness::{
    adversarial_lower_bound, check_converse, check_soundness, estimate_certificate, window_diagnostics,
    run_closed_loop, verify_optimizer_bounds, Certificate, RunOutput, Scenario,
};
use oco_rg::oco::{benchmark_etas, estimate_ogd_kappa, OcoKind};
use oco_rg::safeset::{SafeSet, SafeSetKind};
use oco_rg::tracking::{ConverseLyapunov, TrackingController};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn cstr_config() -> ScenarioConfig {
    load_config(&config_path("cstr.toml")).expect("shipped reactor config loads")
}

struct Run {
    oco: &'static str,
    kind: SafeSetKind,
    scn: Scenario,
    out: RunOutput,
}

struct Fixture {
    cfg: ScenarioConfig,
    ctrl: Arc<TrackingController>,
    etas: Vec<f64>,
    runs: Vec<Run>,
    elapsed_s: f64,
}

impl Fixture {
    fn build() -> Self {
        let cfg = cstr_config();
        let start = Instant::now();
        let ctrl = cfg.build_controller().unwrap();
        let mut runs = Vec::new();
        let mut etas = Vec::new();
        for kind in [SafeSetKind::Fixed, SafeSetKind::Variable] {
            let scn = cfg.build_scenario(cfg.build_set(ctrl.clone(), kind).unwrap()).unwrap();
            if etas.is_empty() {
                etas = benchmark_etas(&scn.cost, cfg.run.horizon).unwrap();
            }
            for (name, oco) in [
                ("ogd", OcoKind::Ogd { step: cfg.oco.step }),
                ("prev-opt", OcoKind::PrevOpt { tolerance: cfg.oco.tolerance }),
            ] {
                let out = run_closed_loop(&scn, GovernorKind::Scalar, oco, Some(&etas)).unwrap();
                runs.push(Run { oco: name, kind, scn: scn.clone(), out });
            }
        }
        let elapsed_s = start.elapsed().as_secs_f64();
        Self { cfg, ctrl, etas, runs, elapsed_s }
    }

    fn certificate(&self, run: &Run) -> Certificate {
        estimate_certificate(&run.scn.set, run.scn.cost_lipschitz(), self.cfg.certificate, &run.scn.x0, run.scn.r0, self.etas[0])
            .unwrap()
    }

    fn set(&self, kind: SafeSetKind) -> Arc<SafeSet> {
        self.cfg.build_set(self.ctrl.clone(), kind).unwrap()
    }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn constraint_safety(fx: &Fixture) -> Outcome {
    let mut detail = Vec::new();
    let mut ok = fx.elapsed_s < 60.0;
    for r in &fx.runs {
        let v = r.out.ledger.violations();
        ok &= v == 0 && r.out.ledger.records.len() == 2400;
        detail.push(format!("{}+{}: {} violations", r.oco, r.kind, v));
    }
    ensure(ok, format!("{}; four runs in {:.1} s", detail.join(", "), fx.elapsed_s))
}

fn table_shape(fx: &Fixture) -> Outcome {
    let regrets: Vec<f64> = fx.runs.iter().map(|r| r.out.ledger.regret()).collect();
    let max = regrets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pct: Vec<f64> = regrets.iter().map(|r| 100.0 * r / max).collect();
    // order: ogd fixed, prev-opt fixed, ogd variable, prev-opt variable
    let (of, pf, ov, pv) = (pct[0], pct[1], pct[2], pct[3]);
    let ok = ov <= 30.0 && pv <= 30.0 && (ov - pv).abs() <= 2.0 && (of - pf).abs() <= 5.0;
    ensure(ok, format!("normalized: ogd/fixed {of:.2}%, prev-opt/fixed {pf:.2}%, ogd/variable {ov:.2}%, prev-opt/variable {pv:.2}%"))
}

fn tracking_sanity(fx: &Fixture) -> Outcome {
    let run = fx.runs.iter().find(|r| r.oco == "prev-opt" && r.kind == SafeSetKind::Variable).unwrap();
    let tau = fx.cfg.plant.cstr.tau;
    let knots = &fx.cfg.cost.cbar_knots;
    let mut worst = 0.0f64;
    let mut plateaus = 0;
    for w in knots.windows(2) {
        if w[0].1 != w[1].1 {
            continue;
        }
        let last = ((w[1].0 / tau).round() as usize).min(run.out.ledger.records.len());
        if last < 200 {
            continue;
        }
        let recs = &run.out.ledger.records[last - 200..last];
        let mean = recs.iter().map(|r| (r.v - r.eta).abs()).sum::<f64>() / 200.0;
        worst = worst.max(mean);
        plateaus += 1;
    }
    ensure(plateaus > 0 && worst <= 0.01, format!("{plateaus} plateau(s), worst mean |v - eta| = {worst:.3e}"))
}

fn soundness(fx: &Fixture) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for kind in [SafeSetKind::Fixed, SafeSetKind::Variable] {
        let rep = check_soundness(&fx.set(kind), 10_000, 50, fx.cfg.run.seed).unwrap();
        ok &= rep.passed();
        detail.push(format!(
            "{kind}: {} violations, {} left, {} errors of {}",
            rep.constraint_violations, rep.left_set, rep.errors, rep.samples
        ));
    }
    ensure(ok, detail.join("; "))
}

fn converse(fx: &Fixture) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for kind in [SafeSetKind::Fixed, SafeSetKind::Variable] {
        let run = fx.runs.iter().find(|r| r.kind == kind).unwrap();
        let cert = fx.certificate(run);
        let cl = ConverseLyapunov::build(fx.ctrl.clone(), cert.fit(), cert.threshold).unwrap();
        let k = cl.constants;
        let lambda2 = cert.c_phi / (1.0 - cert.lambda);
        let lambda3 = 1.0 - cert.c_phi * cert.lambda.powi(k.horizon as i32);
        ok &= k.lambda1 == 1.0 && (k.lambda2 - lambda2).abs() <= 1e-12 * lambda2 && (k.lambda3 - lambda3).abs() <= 1e-12;
        let rep = check_converse(&run.scn.set, &cl, 1000, fx.cfg.run.seed).unwrap();
        ok &= rep.passed(1e-9);
        detail.push(format!(
            "{kind}: N = {}, excess lower {:.2e} upper {:.2e} decrease {:.2e}",
            k.horizon, rep.lower_excess, rep.upper_excess, rep.decrease_excess
        ));
    }
    ensure(ok, detail.join("; "))
}

/// Smallest eigenvalue over all scheduled weights. The interpolated weight is a convex
/// combination of these, so its smallest eigenvalue is at least this value.
fn weight_floor(ctrl: &TrackingController) -> f64 {
    ctrl.schedule()
        .weights()
        .iter()
        .map(|p| ((p + p.transpose()) * 0.5).symmetric_eigenvalues().min())
        .fold(f64::INFINITY, f64::min)
}

/// Largest feasible grid fraction, scanning down from 1. A point is skipped without
/// evaluating membership when `lam * |x - h(v)|^2`, a lower bound on `V`, already exceeds
/// the constant level. The temperature component alone gives a cheaper first filter.
fn pruned_oracle(set: &SafeSet, lam: f64, level: f64, x: &DVector<f64>, v_prev: f64, r: f64, n: usize) -> f64 {
    let ss = set.controller().steady_state();
    let cut = level * (1.0 + 1e-9) + 1e-15;
    let theta = x[1];
    for i in (0..=n).rev() {
        let b = i as f64 / n as f64;
        let v = segment_point(v_prev, r, b);
        let dt = theta - v;
        if lam * dt * dt > cut {
            continue;
        }
        let dc = x[0] - ss.state(v).unwrap()[0];
        if lam * (dc * dc + dt * dt) > cut || local_lyapunov(set, dc, dt, v) > cut {
            continue;
        }
        if set.contains(x, v).unwrap() {
            return b;
        }
    }
    0.0
}

/// Quadratic form with the linearly blended weight, evaluated without allocation.
fn local_lyapunov(set: &SafeSet, dc: f64, dt: f64, v: f64) -> f64 {
    let sched = set.controller().schedule();
    let g = sched.grid();
    let i = g.partition_point(|k| *k <= v).saturating_sub(1).min(g.len() - 2);
    let s = ((v - g[i]) / (g[i + 1] - g[i])).clamp(0.0, 1.0);
    let (a, b) = (&sched.weights()[i], &sched.weights()[i + 1]);
    let p = |r: usize, c: usize| (1.0 - s) * a[(r, c)] + s * b[(r, c)];
    let off = 0.5 * (p(0, 1) + p(1, 0));
    p(0, 0) * dc * dc + 2.0 * off * dc * dt + p(1, 1) * dt * dt
}

fn full_oracle(set: &SafeSet, x: &DVector<f64>, v_prev: f64, r: f64, n: usize) -> f64 {
    (0..=n)
        .rev()
        .map(|i| i as f64 / n as f64)
        .find(|&b| set.contains(x, segment_point(v_prev, r, b)).unwrap())
        .unwrap_or(0.0)
}

struct MaxStats {
    worst: f64,
    pass_through_failures: usize,
    not_tight: usize,
}

fn maximality_on<F: Fn(&DVector<f64>, f64, f64) -> f64>(
    set: &SafeSet,
    instances: usize,
    seed: u64,
    oracle: F,
) -> MaxStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = set.sample(&mut rng, instances / 2, false).unwrap();
    pts.extend(set.sample(&mut rng, instances - instances / 2, true).unwrap());
    let w = set.window();
    let mut st = MaxStats { worst: 0.0, pass_through_failures: 0, not_tight: 0 };
    for (x, v_prev) in pts {
        let r = rng.random_range(w.lo..=w.hi);
        let mut gs = initialize_governor(&x, v_prev, set).unwrap();
        let (_, beta) = apply(GovernorKind::Scalar, &x, r, &mut gs, set).unwrap();
        if set.contains(&x, r).unwrap() && beta != 1.0 {
            st.pass_through_failures += 1;
        }
        if beta < 1.0 && set.contains(&x, segment_point(v_prev, r, beta + 1e-8)).unwrap() {
            st.not_tight += 1;
        }
        st.worst = st.worst.max((beta - oracle(&x, v_prev, r)).abs());
    }
    st
}

fn maximality(fx: &Fixture) -> Outcome {
    let fixed = fx.set(SafeSetKind::Fixed);
    let lam = weight_floor(&fx.ctrl);
    let level = fixed.level(fx.cfg.reference.r0).unwrap();
    let n = 1_000_000;
    let a = maximality_on(&fixed, 1000, fx.cfg.run.seed, |x, vp, r| pruned_oracle(&fixed, lam, level, x, vp, r, n));
    let variable = fx.set(SafeSetKind::Variable);
    let nv = 100_000;
    let b = maximality_on(&variable, 100, fx.cfg.run.seed + 1, |x, vp, r| full_oracle(&variable, x, vp, r, nv));
    let ok = a.worst <= 2e-6
        && a.pass_through_failures == 0
        && a.not_tight == 0
        && b.worst <= 1.0 / nv as f64 + 1e-9
        && b.pass_through_failures == 0
        && b.not_tight == 0;
    ensure(
        ok,
        format!(
            "fixed, 1000 instances on 1e6 grid: max error {:.2e}, pass-through failures {}, non-tight {}; \
             variable, 100 instances on 1e5 grid: max error {:.2e}, pass-through failures {}, non-tight {}",
            a.worst, a.pass_through_failures, a.not_tight, b.worst, b.pass_through_failures, b.not_tight
        ),
    )
}

fn adversarial(fx: &Fixture) -> Outcome {
    let set = fx.set(SafeSetKind::Variable);
    let ss = fx.ctrl.steady_state().clone();
    let t = 400usize;
    let moving: Vec<f64> = (0..t).map(|i| 0.625 + 0.1 * (2.0 * std::f64::consts::PI * i as f64 / 200.0).sin()).collect();
    let (rt, ro, _) = adversarial_lower_bound(
        set.clone(),
        OcoKind::Sequence { values: moving.clone() },
        t,
        ss.state(moving[0]).unwrap(),
        moving[0],
    )
    .unwrap();
    let still = vec![0.6; t];
    let (rt0, ro0, _) =
        adversarial_lower_bound(set, OcoKind::Sequence { values: still }, t, ss.state(0.6).unwrap(), 0.6).unwrap();
    let slack = 1e-9 * t as f64;
    let ok = rt - ro >= -slack && rt > ro && rt0 - ro0 >= -slack;
    ensure(ok, format!("moving: R_T {rt:.6e} vs R_OCO {ro:.6e}; constant: R_T {rt0:.3e} vs R_OCO {ro0:.3e}"))
}

fn optimizer_bound(fx: &Fixture) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for run in fx.runs.iter().filter(|r| r.oco == "prev-opt") {
        let cert = fx.certificate(run);
        let b = verify_optimizer_bounds(&run.out.ledger, &cert, 0.0).unwrap();
        let l = &run.out.ledger;
        let first = &l.records[0];
        let rhs = cert.l_s * (first.r - first.eta).abs() + l.eta_path_length();
        ok &= l.regret_oco() <= rhs && b.regret_unit_path.holds();
        detail.push(format!(
            "prev-opt+{}: {:.4e} <= {:.4e} (coefficient l_s/(1-kappa): {:?})",
            run.kind,
            l.regret_oco(),
            rhs,
            b.regret_patched.status
        ));
    }
    let kappa = estimate_ogd_kappa(fx.ctrl.steady_state().clone(), (50.0, 250.0), (0.27, 0.65), 20, 101, fx.cfg.oco.step)
        .unwrap();
    ok &= kappa < 1.0;
    detail.push(format!("gradient step kappa on 20x20 grid = {kappa:.6}"));
    ensure(ok, detail.join("; "))
}

fn lyapunov_windows(fx: &Fixture) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for run in &fx.runs {
        let cert = fx.certificate(run);
        let cl = ConverseLyapunov::build(fx.ctrl.clone(), cert.fit(), cert.threshold).unwrap();
        let rep = window_diagnostics(&run.out.ledger, &cert, &cl).unwrap();
        ok &= rep.recursion_holds && rep.bound_holds;
        detail.push(format!("{}+{}: {} windows, max V {:.3e}", run.oco, run.kind, rep.windows_checked, rep.max_lyapunov));
    }
    ensure(ok, detail.join("; "))
}

fn memory_reduction() -> Outcome {
    let cfg = load_config(&config_path("shift_register.toml")).unwrap();
    let ctrl = cfg.build_controller().unwrap();
    let scn = cfg.build_scenario(cfg.build_set(ctrl, cfg.safe_set.kind).unwrap()).unwrap();
    let etas = benchmark_etas(&scn.cost, cfg.run.horizon).unwrap();
    let out = run_closed_loop(&scn, cfg.governor.kind, cfg.oco.to_kind(), Some(&etas)).unwrap();
    let cert = estimate_certificate(&scn.set, scn.cost_lipschitz(), cfg.certificate, &scn.x0, scn.r0, etas[0]).unwrap();
    let l = &out.ledger;
    let rhs = cert.c_0 + l.regret_oco() + cert.c_pl * l.path_length();
    let p = cfg.plant.memory;
    let mut diagonal = true;
    for t in 0..cfg.run.horizon {
        for nu in scn.set.window().grid(7) {
            diagonal &= scn.cost.eval(t, nu).unwrap() == cfg.switching.window_cost(t, &vec![nu; p + 1]);
        }
    }
    ensure(
        p == 1 && l.regret() <= rhs && diagonal && l.violations() == 0,
        format!(
            "p = {p}: R_T {:.4e} <= c_0 {:.3e} + R_OCO {:.4e} + c_PL {:.3e} * path {:.4e}; diagonal exact: {diagonal}",
            l.regret(),
            cert.c_0,
            l.regret_oco(),
            cert.c_pl,
            l.path_length()
        ),
    )
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_oco-rg"))
            .args(["simulate", "--config"])
            .arg(config_path("cstr.toml"))
            .arg("--out")
            .arg(d.path())
            .output()
            .unwrap();
        if !status.status.success() {
            return Err(format!("simulate exited with {:?}", status.status.code()));
        }
    }
    let mut same = true;
    for f in ["trajectory.csv", "report.json"] {
        same &= std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap();
    }
    ensure(same, "trajectory.csv and report.json byte-identical across two runs".into())
}

fn main() {
    let fx = Fixture::build();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("constraint safety", Box::new(|| constraint_safety(&fx))),
        ("normalized regret shape", Box::new(|| table_shape(&fx))),
        ("plateau tracking", Box::new(|| tracking_sanity(&fx))),
        ("safe-set soundness", Box::new(|| soundness(&fx))),
        ("converse Lyapunov", Box::new(|| converse(&fx))),
        ("governor maximality", Box::new(|| maximality(&fx))),
        ("adversarial lower bound", Box::new(|| adversarial(&fx))),
        ("optimizer regret plug-in", Box::new(|| optimizer_bound(&fx))),
        ("Lyapunov windows", Box::new(|| lyapunov_windows(&fx))),
        ("memory reduction", Box::new(memory_reduction)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS {:>2} {name} ({secs:.1} s): {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1} s): {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
