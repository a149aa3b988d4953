//! Mode dispatch and artifact emission.
//!
//! Every run writes `report.json` into the output directory; trajectory
//! modes also write `trajectory.csv`. Artifacts are deterministic: the
//! same problem file and seed produce byte-identical outputs.

use std::path::Path;

use algmech_core::error::{Error, Result};
use algmech_core::mechanics::{HamiltonianProblem, LagrangianProblem};
use algmech_core::ocp::{Boundary as OcpBoundary, ControlProblem};
use algmech_core::solve::{
    finite_difference_jet, integrate, pontryagin_columns, shoot, write_csv, BoundarySpec, Method,
    OptimalitySystem, ShootingConfig, Trajectory,
};
use algmech_core::sorusk::{Elimination, PontryaginState, SecondOrderProblem, VakonomicProblem};
use serde_json::{json, Value};

use crate::problem::{load, one_based, parse_problem, Mode, MethodName, ProblemFile};

pub struct Flags {
    /// Overrides the file's validation / regularity tolerance.
    pub tol: Option<f64>,
    /// Seed for chart sampling.
    pub seed: u64,
}

impl Default for Flags {
    fn default() -> Flags {
        Flags { tol: None, seed: 7 }
    }
}

/// Exit code for an error that escaped a run.
pub fn error_code(e: &Error) -> u8 {
    match e {
        Error::NonConvergence { .. } => 2,
        Error::Regularity { .. } => 3,
        _ => 4,
    }
}

fn method_of(pf: &ProblemFile) -> Method {
    match pf.solver.method {
        MethodName::Rk4 => Method::Rk4 { h: pf.solver.h },
        MethodName::Rk45 => Method::Rk45 {
            rtol: pf.solver.rtol,
            atol: pf.solver.atol,
        },
    }
}

fn chart_json(chart: &algmech_core::algebroid::AlgebroidChart) -> Value {
    json!({
        "name": chart.name(),
        "base_dim": chart.base_dim(),
        "fiber_rank": chart.fiber_rank(),
    })
}

fn write_report(out_dir: &Path, report: &Value) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    text.push('\n');
    std::fs::write(out_dir.join("report.json"), text)?;
    Ok(())
}

fn write_trajectory(out_dir: &Path, traj: &Trajectory, columns: &[String]) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut buf = Vec::new();
    write_csv(&mut buf, traj, columns)?;
    std::fs::write(out_dir.join("trajectory.csv"), buf)?;
    Ok(())
}

fn drift(series: &[f64]) -> f64 {
    series
        .iter()
        .map(|v| (v - series[0]).abs())
        .fold(0.0, f64::max)
}

fn max_abs(series: &[f64]) -> f64 {
    series.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn named(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}

/// Runs a problem file in its own mode.
pub fn execute(pf: &ProblemFile, out_dir: &Path, flags: &Flags) -> Result<u8> {
    match pf.mode {
        Mode::Validate => run_validate(pf, Some(out_dir), flags),
        Mode::SimulateEl => run_simulate_el(pf, out_dir),
        Mode::SimulateHamilton => run_simulate_hamilton(pf, out_dir),
        Mode::SecondOrder => run_second_order(pf, out_dir, flags),
        Mode::Vakonomic => run_vakonomic(pf, out_dir, flags),
        Mode::SolveOcp => run_solve_ocp(pf, out_dir, flags),
        Mode::ConstraintChain => run_constraint_chain(pf, out_dir, flags),
    }
}

/// Structure-equation validation; used by both the `validate` subcommand
/// (any mode, optional output) and `run` in validate mode.
pub fn run_validate(pf: &ProblemFile, out_dir: Option<&Path>, flags: &Flags) -> Result<u8> {
    let chart = pf.chart()?;
    let tol = flags.tol.unwrap_or(pf.validation.tol);
    let samples = match &pf.validation.sample_box {
        Some(b) => {
            let intervals: Vec<(f64, f64)> = b.iter().map(|[lo, hi]| (*lo, *hi)).collect();
            chart.sample_states_in_box(pf.validation.samples, flags.seed, &intervals)?
        }
        None => chart.sample_states(pf.validation.samples, flags.seed),
    };
    let report = chart.validate(&samples, tol)?;
    println!(
        "validate: chart {} ({} samples): antisymmetry {:.3e}, anchor compatibility {:.3e}, \
         jacobi {:.3e} -> {}",
        chart.name(),
        report.n_samples,
        report.antisymmetry.max,
        report.anchor_compatibility.max,
        report.jacobi.max,
        if report.passed { "pass" } else { "FAIL" },
    );
    let passed = report.passed;
    if let Some(dir) = out_dir {
        write_report(
            dir,
            &json!({
                "mode": "validate",
                "chart": chart_json(&chart),
                "validation": report,
            }),
        )?;
    }
    if !passed {
        eprintln!("error: chart validation failed (structure equations violated)");
    }
    Ok(if passed { 0 } else { 4 })
}

fn run_simulate_el(pf: &ProblemFile, out_dir: &Path) -> Result<u8> {
    let chart = pf.chart()?;
    let (m, n) = (chart.base_dim(), chart.fiber_rank());
    let src = pf.required(&pf.lagrangian, "/lagrangian", "a first-order Lagrangian")?;
    let lagrangian = pf.scalar_field(src, &[("x", m), ("y", n)], "/lagrangian")?;
    let prob = LagrangianProblem::new(chart, lagrangian)?;

    let bf = pf.boundary()?;
    let x0 = bf.block(&bf.x0, m, "/boundary/x0")?;
    let y0 = bf.block(&bf.y0, n, "/boundary/y0")?;
    let mut s0 = x0.to_vec();
    s0.extend_from_slice(y0);

    let field = |s: &[f64], o: &mut [f64]| -> Result<()> {
        let (x, y) = s.split_at(m);
        let (xd, yd) = prob.el_rhs(x, y)?;
        o[..m].copy_from_slice(xd.as_slice());
        o[m..].copy_from_slice(yd.as_slice());
        Ok(())
    };
    let mut traj = integrate(field, &s0, bf.horizon()?, method_of(pf))?;
    traj.compute_monitor("E", |s| prob.energy(&s[..m], &s[m..]))?;

    let mut columns = named("x", m);
    columns.extend(named("y", n));
    write_trajectory(out_dir, &traj, &columns)?;
    let energy_drift = drift(traj.monitor("E").expect("monitor just computed"));
    write_report(
        out_dir,
        &json!({
            "mode": "simulate-el",
            "chart": chart_json(&prob.chart),
            "columns": columns,
            "nodes": traj.times().len(),
            "t_end": traj.end_time(),
            "energy_drift_max": energy_drift,
            "final_state": traj.end_state(),
        }),
    )?;
    println!(
        "simulate-el: {} nodes, energy drift {energy_drift:.3e}",
        traj.times().len()
    );
    Ok(0)
}

fn run_simulate_hamilton(pf: &ProblemFile, out_dir: &Path) -> Result<u8> {
    let chart = pf.chart()?;
    let (m, n) = (chart.base_dim(), chart.fiber_rank());
    let src = pf.required(&pf.hamiltonian, "/hamiltonian", "a Hamiltonian")?;
    let hamiltonian = pf.scalar_field(src, &[("x", m), ("p", n)], "/hamiltonian")?;
    let prob = HamiltonianProblem::new(chart, hamiltonian)?;

    let bf = pf.boundary()?;
    let x0 = bf.block(&bf.x0, m, "/boundary/x0")?;
    let p0v = pf.required(&bf.p0, "/boundary/p0", "initial momenta p0")?;
    let p0 = bf.block(p0v, n, "/boundary/p0")?;
    let mut s0 = x0.to_vec();
    s0.extend_from_slice(p0);

    let field = |s: &[f64], o: &mut [f64]| -> Result<()> {
        let (x, p) = s.split_at(m);
        let (xd, pd) = prob.hamilton_rhs(x, p)?;
        o[..m].copy_from_slice(xd.as_slice());
        o[m..].copy_from_slice(pd.as_slice());
        Ok(())
    };
    let mut traj = integrate(field, &s0, bf.horizon()?, method_of(pf))?;
    traj.compute_monitor("H", |s| prob.value(&s[..m], &s[m..]))?;

    let mut columns = named("x", m);
    columns.extend(named("p", n));
    write_trajectory(out_dir, &traj, &columns)?;
    let h_drift = drift(traj.monitor("H").expect("monitor just computed"));
    write_report(
        out_dir,
        &json!({
            "mode": "simulate-hamilton",
            "chart": chart_json(&prob.chart),
            "columns": columns,
            "nodes": traj.times().len(),
            "t_end": traj.end_time(),
            "hamiltonian_drift_max": h_drift,
            "final_state": traj.end_state(),
        }),
    )?;
    println!(
        "simulate-hamilton: {} nodes, drift {h_drift:.3e}",
        traj.times().len()
    );
    Ok(0)
}

fn run_second_order(pf: &ProblemFile, out_dir: &Path, flags: &Flags) -> Result<u8> {
    if pf.constraints.is_some() {
        return Err(Error::Config(
            "second-order mode is unconstrained; use vakonomic or solve-ocp for \
             constrained problems"
                .into(),
        ));
    }
    let chart = pf.chart()?;
    let (m, n) = (chart.base_dim(), chart.fiber_rank());
    let src = pf.required(&pf.lagrangian, "/lagrangian", "a second-order Lagrangian")?;
    let lagrangian = pf.scalar_field(src, &[("x", m), ("y", n), ("z", n)], "/lagrangian")?;
    let prob = SecondOrderProblem::new(chart, lagrangian)?;

    let bf = pf.boundary()?;
    let x0 = bf.block(&bf.x0, m, "/boundary/x0")?;
    let y0 = bf.block(&bf.y0, n, "/boundary/y0")?;
    let z0v = pf.required(&bf.z0, "/boundary/z0", "initial accelerations z0")?;
    let z0 = bf.block(z0v, n, "/boundary/z0")?;
    let p0 = bf.block_or_zeros(&bf.p0, n, "/boundary/p0")?;

    let reg_tol = flags.tol.unwrap_or(pf.solver.newton_tol);
    let regularity = prob.regularity_test(x0, y0, z0, None, reg_tol)?;
    if !regularity.regular {
        write_report(
            out_dir,
            &json!({
                "mode": "second-order",
                "chart": chart_json(prob.chart()),
                "regularity": regularity,
            }),
        )?;
        eprintln!("error: the acceleration Hessian is singular; dynamics are not determined");
        return Ok(3);
    }

    let s0 = prob.primary_lift(x0, y0, z0, &p0)?.flatten();
    let mut traj = integrate(
        |s: &[f64], o: &mut [f64]| prob.optimality_field_flat(s, o),
        &s0,
        bf.horizon()?,
        method_of(pf),
    )?;
    traj.compute_monitor("H", |s| {
        prob.pontryagin_hamiltonian(&PontryaginState::from_flat(m, n, s)?)
    })?;
    for c in 0..n {
        traj.compute_monitor(&format!("c{}", c + 1), |s| {
            Ok(prob.primary_constraint(&PontryaginState::from_flat(m, n, s)?)?[c])
        })?;
    }

    let columns = pontryagin_columns(m, n);
    write_trajectory(out_dir, &traj, &columns)?;
    let h_drift = drift(traj.monitor("H").expect("monitor just computed"));
    let mut c_max = 0.0f64;
    for c in 0..n {
        c_max = c_max.max(max_abs(traj.monitor(&format!("c{}", c + 1)).unwrap()));
    }
    write_report(
        out_dir,
        &json!({
            "mode": "second-order",
            "chart": chart_json(prob.chart()),
            "columns": columns,
            "nodes": traj.times().len(),
            "t_end": traj.end_time(),
            "regularity": regularity,
            "hamiltonian_drift_max": h_drift,
            "primary_constraint_max": c_max,
        }),
    )?;
    println!(
        "second-order: {} nodes, drift {h_drift:.3e}, primary constraint {c_max:.3e}",
        traj.times().len()
    );
    Ok(0)
}

fn run_vakonomic(pf: &ProblemFile, out_dir: &Path, flags: &Flags) -> Result<u8> {
    let chart = pf.chart()?;
    let (m, n) = (chart.base_dim(), chart.fiber_rank());
    let src = pf.required(&pf.lagrangian, "/lagrangian", "a first-order Lagrangian")?;
    let lagrangian = pf.scalar_field(src, &[("x", m), ("y", n)], "/lagrangian")?;

    let phis = pf.required(&pf.constraints, "/constraints", "constraint expressions")?;
    if phis.is_empty() {
        return Err(Error::Config("vakonomic mode needs at least one constraint".into()));
    }
    let elim_onebased = pf.required(&pf.eliminated, "/eliminated", "eliminated fiber indices")?;
    let eliminated = one_based(elim_onebased, n, "/eliminated")?;
    if eliminated.len() != phis.len() {
        return Err(Error::Config(format!(
            "{} constraints but {} eliminated indices; these must match",
            phis.len(),
            eliminated.len()
        )));
    }
    let sig = algmech_core::calculus::Signature::new(&[("x", m), ("y", n)])?
        .with_params(&pf.param_list())?;
    let phi_srcs: Vec<&str> = phis.iter().map(String::as_str).collect();
    let phi = algmech_core::calculus::Field::parse(
        sig,
        algmech_core::calculus::Shape::Vector(phis.len()),
        &phi_srcs,
    )
    .map_err(|e| match e {
        Error::Parse { .. } | Error::UnknownIdentifier { .. } => {
            Error::Validation(format!("problem file at `/constraints`: {e}"))
        }
        other => other,
    })?;

    let bf = pf.boundary()?;
    let x0 = bf.block(&bf.x0, m, "/boundary/x0")?;
    let y0 = bf.block(&bf.y0, n, "/boundary/y0")?;
    let p_elim = bf.block_or_zeros(&bf.p0, eliminated.len(), "/boundary/p0")?;
    let guess: Vec<f64> = eliminated.iter().map(|a| y0[*a]).collect();

    let prob = VakonomicProblem::new(
        chart,
        lagrangian,
        eliminated.clone(),
        Elimination::Implicit {
            phi,
            guess,
            tol: pf.solver.newton_tol,
            max_iter: pf.solver.max_iter,
        },
    )?;
    let ya: Vec<f64> = prob.retained().iter().map(|a| y0[*a]).collect();
    let s0 = prob.primary_lift(x0, &ya, &p_elim)?;

    let reg_tol = flags.tol.unwrap_or(pf.solver.newton_tol);
    let regularity = prob.regularity_test(&s0, reg_tol)?;
    if !regularity.regular {
        write_report(
            out_dir,
            &json!({
                "mode": "vakonomic",
                "chart": chart_json(prob.chart()),
                "regularity": regularity,
            }),
        )?;
        eprintln!("error: the restricted velocity Hessian is singular on the constraint");
        return Ok(3);
    }

    let kr = prob.eliminated().len();
    let mut traj = integrate(
        |s: &[f64], o: &mut [f64]| prob.vakonomic_field(s, o),
        &s0,
        bf.horizon()?,
        method_of(pf),
    )?;
    traj.compute_monitor("H", |s| prob.hamiltonian(s))?;
    for c in 0..kr {
        traj.compute_monitor(&format!("c{}", c + 1), |s| Ok(prob.constraint_residual(s)?[c]))?;
    }

    let mut columns = named("x", m);
    columns.extend(named("p", n));
    columns.extend(prob.retained().iter().map(|a| format!("y{}", a + 1)));
    write_trajectory(out_dir, &traj, &columns)?;
    let h_drift = drift(traj.monitor("H").expect("monitor just computed"));
    let mut c_max = 0.0f64;
    for c in 0..kr {
        c_max = c_max.max(max_abs(traj.monitor(&format!("c{}", c + 1)).unwrap()));
    }
    write_report(
        out_dir,
        &json!({
            "mode": "vakonomic",
            "chart": chart_json(prob.chart()),
            "columns": columns,
            "eliminated": elim_onebased,
            "nodes": traj.times().len(),
            "t_end": traj.end_time(),
            "regularity": regularity,
            "hamiltonian_drift_max": h_drift,
            "multiplier_consistency_max": c_max,
        }),
    )?;
    println!(
        "vakonomic: {} nodes, drift {h_drift:.3e}, multiplier consistency {c_max:.3e}",
        traj.times().len()
    );
    Ok(0)
}

fn run_solve_ocp(pf: &ProblemFile, out_dir: &Path, flags: &Flags) -> Result<u8> {
    let chart = pf.chart()?;
    let (m, n) = (chart.base_dim(), chart.fiber_rank());
    let l_src = pf.required(&pf.lagrangian, "/lagrangian", "a dynamics Lagrangian")?;
    let lagrangian = pf.scalar_field(l_src, &[("x", m), ("y", n)], "/lagrangian")?;
    let actuated = match &pf.actuation {
        Some(list) => one_based(list, n, "/actuation")?,
        None => (0..n).collect(),
    };
    let k = actuated.len();
    let c_src = pf.required(&pf.cost, "/cost", "a control cost")?;
    let cost = pf.scalar_field(c_src, &[("x", m), ("y", n), ("u", k)], "/cost")?;

    let bf = pf.boundary()?;
    let horizon = bf.horizon()?;
    let x0 = bf.block(&bf.x0, m, "/boundary/x0")?.to_vec();
    let y0 = bf.block(&bf.y0, n, "/boundary/y0")?.to_vec();
    let x_end = match &bf.x_end {
        Some(v) => bf.block(v, m, "/boundary/xT")?.to_vec(),
        None => x0.clone(),
    };
    let y_end = match &bf.y_end {
        Some(v) => bf.block(v, n, "/boundary/yT")?.to_vec(),
        None => y0.clone(),
    };
    let control = ControlProblem::new(
        chart,
        lagrangian,
        cost,
        actuated.clone(),
        OcpBoundary {
            x0: x0.clone(),
            y0: y0.clone(),
            x_end,
            y_end,
        },
        horizon,
    )?;

    let full;
    let under;
    let sys = if k == n {
        full = control.build_fully_actuated()?;
        OptimalitySystem::Full(&full)
    } else {
        under = control.build_underactuated()?;
        OptimalitySystem::Reduced(under.reduced())
    };
    let zd = sys.z_dim();
    let extra = sys.extra_costates();

    // Regularity of the synthesized problem at the initial data (zeros for
    // unspecified acceleration); a singular matrix here means the
    // optimality dynamics are not determined anywhere nearby.
    let z_probe = bf.block_or_zeros(&bf.z0, zd, "/boundary/z0")?;
    let reg_tol = flags.tol.unwrap_or(pf.solver.newton_tol);
    let regularity = match sys {
        OptimalitySystem::Full(p) => p.regularity_test(&x0, &y0, &z_probe, None, reg_tol)?,
        OptimalitySystem::Reduced(p) => {
            let s = p.primary_lift(&x0, &y0, &z_probe, &vec![0.0; n], &vec![0.0; extra])?;
            p.regularity_test(&s, reg_tol)?
        }
    };
    if !regularity.regular {
        write_report(
            out_dir,
            &json!({
                "mode": "solve-ocp",
                "chart": chart_json(control.chart()),
                "actuation": actuated.iter().map(|a| a + 1).collect::<Vec<_>>(),
                "regularity": regularity,
            }),
        )?;
        eprintln!("error: the synthesized second-order Lagrangian is degenerate");
        return Ok(3);
    }

    let columns = match sys {
        OptimalitySystem::Full(_) => pontryagin_columns(m, n),
        OptimalitySystem::Reduced(p) => {
            let mut cols = named("x", m);
            cols.extend(named("y", n));
            cols.extend(p.actuated().iter().map(|a| format!("z{}", a + 1)));
            cols.extend(named("p", n));
            cols.extend(named("pbar", n));
            cols
        }
    };

    let is_bvp = bf.x_end.is_some() || bf.y_end.is_some() || bf.z_end.is_some();
    let (mut traj, shooting_json, code) = if is_bvp {
        let boundary = BoundarySpec {
            x0: x0.clone(),
            y0: y0.clone(),
            z0: bf.z0.clone(),
            x_end: bf.x_end.clone(),
            y_end: bf.y_end.clone(),
            z_end: bf.z_end.clone(),
        };
        let guess = if bf.p0.is_some() || bf.pbar0.is_some() {
            let mut g = Vec::new();
            if bf.z0.is_none() {
                g.extend(std::iter::repeat(0.0).take(zd));
            }
            g.extend(bf.block_or_zeros(&bf.p0, n, "/boundary/p0")?);
            g.extend(bf.block_or_zeros(&bf.pbar0, extra, "/boundary/pbar0")?);
            Some(g)
        } else {
            None
        };
        let cfg = ShootingConfig {
            method: method_of(pf),
            segments: pf.solver.segments,
            tol: pf.solver.newton_tol,
            max_iter: pf.solver.max_iter,
            guess,
        };
        let (res, traj) = shoot(&sys, &boundary, horizon, &cfg)?;
        println!(
            "solve-ocp: shooting {} after {} iterations, residual {:.3e}",
            if res.converged { "converged" } else { "did NOT converge" },
            res.iterations,
            res.residual_norm,
        );
        if !res.converged {
            eprintln!(
                "error: shooting stalled at residual {:.3e} (tolerance {:.3e})",
                res.residual_norm, pf.solver.newton_tol
            );
        }
        let code = if res.converged { 0 } else { 2 };
        let sj = json!({
            "converged": res.converged,
            "residual_norm": res.residual_norm,
            "iterations": res.iterations,
            "unknowns": res.unknowns,
        });
        (traj, sj, code)
    } else {
        let z0 = bf.block_or_zeros(&bf.z0, zd, "/boundary/z0")?;
        let p0 = bf.block_or_zeros(&bf.p0, n, "/boundary/p0")?;
        let pbar0 = bf.block_or_zeros(&bf.pbar0, extra, "/boundary/pbar0")?;
        let s0 = match sys {
            OptimalitySystem::Full(p) => p.primary_lift(&x0, &y0, &z0, &p0)?.flatten(),
            OptimalitySystem::Reduced(p) => p.primary_lift(&x0, &y0, &z0, &p0, &pbar0)?,
        };
        let traj = integrate(
            |s: &[f64], o: &mut [f64]| sys.field(s, o),
            &s0,
            horizon,
            method_of(pf),
        )?;
        println!("solve-ocp: integrated optimality flow, {} nodes", traj.times().len());
        (traj, Value::Null, 0)
    };

    traj.compute_monitor("H", |s| sys.hamiltonian(s))?;
    let n_c = match sys {
        OptimalitySystem::Full(_) => n,
        OptimalitySystem::Reduced(_) => zd,
    };
    for c in 0..n_c {
        traj.compute_monitor(&format!("c{}", c + 1), |s| match sys {
            OptimalitySystem::Full(p) => {
                Ok(p.primary_constraint(&PontryaginState::from_flat(m, n, s)?)?[c])
            }
            OptimalitySystem::Reduced(p) => Ok(p.primary_residual(s)?[c]),
        })?;
    }
    write_trajectory(out_dir, &traj, &columns)?;

    let h_drift = drift(traj.monitor("H").expect("monitor just computed"));
    let mut c_max = 0.0f64;
    for c in 0..n_c {
        c_max = c_max.max(max_abs(traj.monitor(&format!("c{}", c + 1)).unwrap()));
    }
    let spline = spline_residual(&sys, &traj, m, n)?;
    write_report(
        out_dir,
        &json!({
            "mode": "solve-ocp",
            "chart": chart_json(control.chart()),
            "actuation": actuated.iter().map(|a| a + 1).collect::<Vec<_>>(),
            "columns": columns,
            "nodes": traj.times().len(),
            "t_end": traj.end_time(),
            "regularity": regularity,
            "hamiltonian_drift_max": h_drift,
            "primary_constraint_max": c_max,
            "shooting": shooting_json,
            "spline_residual_max": spline,
        }),
    )?;
    Ok(code)
}

/// For fully actuated rank-3 Lie algebra problems, the jerk identity
/// residual `max_t || d3y/dt3 + y x d2y/dt2 ||_inf` over the interior
/// window `[0.05 T, 0.95 T]`, reconstructed from dense output. With equal
/// inertias and quadratic control cost this vanishes along extremals.
fn spline_residual(
    sys: &OptimalitySystem,
    traj: &Trajectory,
    m: usize,
    n: usize,
) -> Result<Value> {
    if m != 0 || n != 3 || !matches!(sys, OptimalitySystem::Full(_)) {
        return Ok(Value::Null);
    }
    let t_end = traj.end_time();
    let mut worst = 0.0f64;
    let mut t = 0.05 * t_end;
    while t <= 0.95 * t_end + 1e-12 {
        let omega = traj.sample(t)?;
        let mut d2 = [0.0; 3];
        let mut d3 = [0.0; 3];
        for ch in 0..3 {
            d2[ch] = finite_difference_jet(traj, ch, 2, t)?;
            d3[ch] = finite_difference_jet(traj, ch, 3, t)?;
        }
        let cross = [
            omega[1] * d2[2] - omega[2] * d2[1],
            omega[2] * d2[0] - omega[0] * d2[2],
            omega[0] * d2[1] - omega[1] * d2[0],
        ];
        for ch in 0..3 {
            worst = worst.max((d3[ch] + cross[ch]).abs());
        }
        t += 0.05 * t_end;
    }
    Ok(json!(worst))
}

fn run_constraint_chain(pf: &ProblemFile, out_dir: &Path, flags: &Flags) -> Result<u8> {
    let chart = pf.chart()?;
    let (m, n) = (chart.base_dim(), chart.fiber_rank());
    let src = pf.required(&pf.lagrangian, "/lagrangian", "a second-order Lagrangian")?;
    let lagrangian = pf.scalar_field(src, &[("x", m), ("y", n), ("z", n)], "/lagrangian")?;
    let prob = SecondOrderProblem::new(chart, lagrangian)?;

    let bf = pf.boundary()?;
    let x0 = bf.block(&bf.x0, m, "/boundary/x0")?;
    let y0 = bf.block(&bf.y0, n, "/boundary/y0")?;
    let z0v = pf.required(&bf.z0, "/boundary/z0", "a sample acceleration z0")?;
    let z0 = bf.block(z0v, n, "/boundary/z0")?;
    let p0 = bf.block_or_zeros(&bf.p0, n, "/boundary/p0")?;
    let pbar0 = bf.block_or_zeros(&bf.pbar0, n, "/boundary/pbar0")?;

    let mut flat = x0.to_vec();
    flat.extend_from_slice(y0);
    flat.extend_from_slice(z0);
    flat.extend_from_slice(&p0);
    flat.extend_from_slice(&pbar0);
    let sample = PontryaginState::from_flat(m, n, &flat)?;

    let tol = flags.tol.unwrap_or(pf.solver.newton_tol);
    let chain = prob.run_constraint_algorithm(&sample, tol)?;
    let regularity = prob.regularity_test(x0, y0, z0, None, tol)?;
    println!(
        "constraint-chain: {} levels, stabilized = {}, final admitted dimension {}",
        chain.levels.len(),
        chain.stabilized,
        chain.final_admitted_dim,
    );
    write_report(
        out_dir,
        &json!({
            "mode": "constraint-chain",
            "chart": chart_json(prob.chart()),
            "chain": chain,
            "regularity": regularity,
        }),
    )?;
    Ok(0)
}

/// Fans independent runs out over one numeric parameter, one output
/// directory per value.
pub fn sweep(
    input: &Path,
    out_root: &Path,
    param: &str,
    values: &[String],
    flags: &Flags,
) -> Result<u8> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let text = std::fs::read_to_string(input)?;
    let base: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("problem file: {e}")))?;
    let segments: Vec<&str> = param.split('.').collect();

    // Prepare every variant document up front so path errors surface
    // before any thread starts.
    let mut jobs: Vec<(String, String)> = Vec::new();
    for v in values {
        let parsed: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("sweep value `{v}` is not a number")))?;
        let mut doc = base.clone();
        set_numeric_path(&mut doc, &segments, parsed, param)?;
        let doc_text = serde_json::to_string(&doc)
            .map_err(|e| Error::Config(format!("sweep document serialization: {e}")))?;
        jobs.push((v.clone(), doc_text));
    }

    let codes: Vec<u8> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(value, doc_text)| {
                scope.spawn(move || -> u8 {
                    let dir = out_root.join(format!("{param}={value}"));
                    let outcome = parse_problem(doc_text)
                        .and_then(|pf| execute(&pf, &dir, &Flags { tol: flags.tol, seed: flags.seed }));
                    match outcome {
                        Ok(code) => code,
                        Err(e) => {
                            eprintln!("error [{param}={value}]: {e}");
                            error_code(&e)
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or(4))
            .collect()
    });
    for ((value, _), code) in jobs.iter().zip(&codes) {
        println!("sweep {param}={value}: exit {code}");
    }
    Ok(codes.into_iter().max().unwrap_or(0))
}

fn set_numeric_path(doc: &mut Value, segments: &[&str], value: f64, param: &str) -> Result<()> {
    let mut cursor = doc;
    for seg in &segments[..segments.len() - 1] {
        cursor = cursor
            .as_object_mut()
            .and_then(|map| map.get_mut(*seg))
            .ok_or_else(|| {
                Error::Config(format!("sweep path `{param}`: `{seg}` is not an object in the file"))
            })?;
    }
    let last = segments[segments.len() - 1];
    let map = cursor.as_object_mut().ok_or_else(|| {
        Error::Config(format!("sweep path `{param}` does not end inside an object"))
    })?;
    let num = serde_json::Number::from_f64(value)
        .ok_or_else(|| Error::Config(format!("sweep value {value} is not representable")))?;
    map.insert(last.to_string(), Value::Number(num));
    Ok(())
}

/// Entry point shared by the `run` subcommand.
pub fn run_file(input: &Path, out_dir: &Path, flags: &Flags) -> Result<u8> {
    let pf = load(input)?;
    log::info!("loaded problem file {:?}, mode {}", input, pf.mode.name());
    execute(&pf, out_dir, flags)
}

/// Entry point for the `validate` subcommand: checks the chart of any
/// problem file, regardless of its mode.
pub fn validate_file(input: &Path, out_dir: Option<&Path>, flags: &Flags) -> Result<u8> {
    let pf = load(input)?;
    run_validate(&pf, out_dir, flags)
}
